//! Per-slot trading protocol over the simulated ledger: plug-in and
//! identity, signed info transfer, oracle assimilation, distributed
//! price search, vote-and-commit, settlement, light-client sync.
//!
//! Each slot commits exactly one block on every node or leaves all
//! chains untouched.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fleet::{EvRecord, SLOT_HOURS};
use crate::ledger::{
    self, append_block, sign, submit_transaction, verify_header_chain, BlockHeader, Chain,
    LedgerError, Registry, Transaction, TxPayload, TxPool, WalletKey,
};
use crate::market::{
    eva_revenue, leader_grid_search, partition_grid, price_grid, reduce_search_results,
    solution_at, EvChargeState, FollowerMode, LeaderSolution, MarketError, MarketParams,
    RevenueBreakdown, SearchResult,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("charging point {0} is occupied")]
    OccupiedPoint(String),
    #[error("identity verification failed for ev {0}")]
    IdentityFailure(u64),
    #[error("no functional nodes")]
    NoFunctionalNodes,
    #[error("missing oracle feed for slot {0}")]
    MissingFeed(u64),
    #[error("insufficient votes: {got} of {nodes} nodes approved")]
    InsufficientVotes { got: usize, nodes: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("stale slot {got}, next is {next}")]
    StaleSlot { got: u64, next: u64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// A smart charging point: blockchain full node with a compute weight
/// used when subranges of the price grid are allocated.
#[derive(Debug, Clone)]
pub struct ScpNode {
    pub node_id: String,
    pub compute_capacity: f64,
    pub wallet: WalletKey,
    pub chain: Chain,
    pub plugged_ev: Option<u64>,
    /// Best revenue found on this node's subrange in the current slot,
    /// the yardstick for its vote.
    local_best: Option<SearchResult>,
}

/// An EV as a ledger light client: wallet, header chain, battery state.
#[derive(Debug, Clone)]
pub struct LightClientEv {
    pub ev_id: u64,
    pub wallet: WalletKey,
    pub headers: Vec<BlockHeader>,
    pub charge_state: EvChargeState,
    pub balance: f64,
    pub arrival_slot: u64,
    pub departure_slot: u64,
    /// Index of the SCP this EV is plugged into.
    pub session_node: Option<usize>,
}

/// Per-slot market data injected by the oracle.
#[derive(Debug, Clone)]
pub struct OracleFeed {
    params: Vec<MarketParams>,
}

impl OracleFeed {
    pub fn new(params: Vec<MarketParams>) -> Self {
        Self { params }
    }

    pub fn horizon(&self) -> u64 {
        self.params.len() as u64
    }

    pub fn params_at(&self, slot: u64) -> Result<&MarketParams, ProtocolError> {
        self.params
            .get(slot as usize)
            .ok_or(ProtocolError::MissingFeed(slot))
    }
}

/// Aggregator account: the EVA's wallet plus its cash flows, split into
/// the EV-facing flow and the external grid-operator flows.
#[derive(Debug, Clone)]
pub struct EvaAccount {
    pub wallet: WalletKey,
    /// Net CNY received from EVs (charging fees minus discharge payouts
    /// and idle credits).
    pub ev_flow: f64,
    /// Auxiliary-market revenue received from the grid operator.
    pub grid_inflow: f64,
    /// Penalties paid to the grid operator.
    pub penalty_outflow: f64,
}

impl EvaAccount {
    pub fn profit(&self) -> f64 {
        self.ev_flow + self.grid_inflow - self.penalty_outflow
    }
}

/// Result of one committed slot.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub slot: u64,
    pub p_d_star: f64,
    pub breakdown: RevenueBreakdown,
    /// (ev_id, x, payment in CNY debited from the EV wallet).
    pub dispatches: Vec<(u64, f64, f64)>,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub block_height: u64,
}

/// Initial EV description handed to the world: a driving pattern plus
/// the preference constants.
#[derive(Debug, Clone)]
pub struct EvInit {
    pub record: EvRecord,
    pub beta: f64,
    pub a: f64,
    pub u_idle: f64,
}

/// The whole simulated system: SCP full nodes, light-client EVs, the
/// oracle feed, the aggregator, and the shared transaction pool.
#[derive(Debug)]
pub struct World {
    pub nodes: Vec<ScpNode>,
    pub evs: Vec<LightClientEv>,
    pub feed: OracleFeed,
    pub oracle_wallet: WalletKey,
    pub eva: EvaAccount,
    pub pool: TxPool,
    pub registry: Arc<Registry>,
    next_slot: u64,
}

impl World {
    pub fn new(
        scp_capacities: &[f64],
        evs: Vec<EvInit>,
        feed: OracleFeed,
        seed: u64,
    ) -> Result<World, ProtocolError> {
        if scp_capacities.is_empty() {
            return Err(ProtocolError::NoFunctionalNodes);
        }
        let mut registry = Registry::default();
        let node_wallets: Vec<WalletKey> = (0..scp_capacities.len())
            .map(|i| WalletKey::derive(&format!("scp-{i}"), seed))
            .collect();
        for w in &node_wallets {
            registry
                .full_nodes
                .push((w.wallet_id.clone(), w.verify_key.clone()));
            registry
                .wallets
                .insert(w.wallet_id.clone(), w.verify_key.clone());
        }
        let oracle_wallet = WalletKey::derive("oracle", seed);
        let eva_wallet = WalletKey::derive("eva", seed);
        registry
            .wallets
            .insert(oracle_wallet.wallet_id.clone(), oracle_wallet.verify_key.clone());
        registry
            .wallets
            .insert(eva_wallet.wallet_id.clone(), eva_wallet.verify_key.clone());

        let mut clients = Vec::with_capacity(evs.len());
        for init in &evs {
            init.record.validate().map_err(|e| ProtocolError::Validation(e.to_string()))?;
            let wallet = WalletKey::derive(&format!("ev-{}", init.record.ev_id), seed);
            registry
                .wallets
                .insert(wallet.wallet_id.clone(), wallet.verify_key.clone());
            let charge_state = EvChargeState {
                ev_id: init.record.ev_id,
                capacity: init.record.battery_kwh,
                soc: init.record.initial_kwh / init.record.battery_kwh,
                beta: init.beta,
                a: init.a,
                u_idle: init.u_idle,
            };
            charge_state.validate()?;
            clients.push(LightClientEv {
                ev_id: init.record.ev_id,
                wallet,
                headers: Vec::new(),
                charge_state,
                balance: 0.0,
                arrival_slot: init.record.arrival_slot,
                departure_slot: init.record.departure_slot,
                session_node: None,
            });
        }

        let registry = Arc::new(registry);
        let genesis_chain = Chain::new(Arc::clone(&registry));
        let genesis_header = genesis_chain.tip().header.clone();
        for ev in &mut clients {
            ev.headers.push(genesis_header.clone());
        }
        let nodes = node_wallets
            .into_iter()
            .zip(scp_capacities)
            .map(|(wallet, &compute_capacity)| ScpNode {
                node_id: wallet.wallet_id.clone(),
                compute_capacity,
                wallet,
                chain: genesis_chain.clone(),
                plugged_ev: None,
                local_best: None,
            })
            .collect();
        Ok(World {
            nodes,
            evs: clients,
            feed,
            oracle_wallet,
            eva: EvaAccount {
                wallet: eva_wallet,
                ev_flow: 0.0,
                grid_inflow: 0.0,
                penalty_outflow: 0.0,
            },
            pool: TxPool::new(),
            registry,
            next_slot: 0,
        })
    }

    pub fn next_slot(&self) -> u64 {
        self.next_slot
    }

    /// Start the clock at a later slot (e.g., a day anchored at 07:00).
    /// Only valid before anything has been committed.
    pub fn fast_forward(&mut self, slot: u64) -> Result<(), ProtocolError> {
        if self.next_slot != 0 || self.nodes[0].chain.blocks.len() != 1 {
            return Err(ProtocolError::StaleSlot {
                got: slot,
                next: self.next_slot,
            });
        }
        self.next_slot = slot;
        Ok(())
    }

    /// Plug an EV into a node and record the signed PlugIn transaction.
    pub fn plug_in(&mut self, node_idx: usize, ev_idx: usize, slot: u64) -> Result<(), ProtocolError> {
        if let Some(occupant) = self.nodes[node_idx].plugged_ev {
            if occupant != self.evs[ev_idx].ev_id {
                return Err(ProtocolError::OccupiedPoint(
                    self.nodes[node_idx].node_id.clone(),
                ));
            }
        }
        let ev = &mut self.evs[ev_idx];
        let txn = Transaction::signed(
            TxPayload::PlugIn {
                ev_id: ev.ev_id,
                node_id: self.nodes[node_idx].node_id.clone(),
            },
            &mut ev.wallet,
            slot,
        );
        let ev_id = ev.ev_id;
        submit_transaction(&mut self.pool, txn, &self.nodes[node_idx].chain).map_err(|e| {
            match e {
                LedgerError::BadSignature => ProtocolError::IdentityFailure(ev_id),
                other => ProtocolError::Ledger(other),
            }
        })?;
        self.nodes[node_idx].plugged_ev = Some(ev_id);
        self.evs[ev_idx].session_node = Some(node_idx);
        // Catch up on headers missed while away.
        sync_light_client(&mut self.evs[ev_idx], &self.nodes[node_idx].chain)?;
        Ok(())
    }

    /// Unplug at departure; the session simply ends with whatever SOC
    /// the EV has.
    fn unplug(&mut self, ev_idx: usize) {
        if let Some(node_idx) = self.evs[ev_idx].session_node.take() {
            self.nodes[node_idx].plugged_ev = None;
        }
    }

    /// Submit the signed follower parameters of one plugged EV.
    pub fn transfer_info(&mut self, ev_idx: usize, slot: u64) -> Result<(), ProtocolError> {
        let node_idx = self.evs[ev_idx]
            .session_node
            .ok_or_else(|| ProtocolError::Validation("ev has no live session".into()))?;
        let ev = &mut self.evs[ev_idx];
        let payload = TxPayload::EvInfo {
            ev_id: ev.ev_id,
            soc: ev.charge_state.soc,
            capacity: ev.charge_state.capacity,
            beta: ev.charge_state.beta,
            u_idle: ev.charge_state.u_idle,
            a: ev.charge_state.a,
        };
        validate_ev_info(&payload)?;
        let txn = Transaction::signed(payload, &mut ev.wallet, slot);
        submit_transaction(&mut self.pool, txn, &self.nodes[node_idx].chain)?;
        Ok(())
    }

    /// Read the oracle feed for `slot` and put the market inputs on
    /// chain.
    pub fn assimilate_data(&mut self, slot: u64) -> Result<MarketParams, ProtocolError> {
        let params = self.feed.params_at(slot)?.clone();
        let txn = Transaction::signed(
            TxPayload::OracleUpdate {
                p_real_time: params.p_real_time,
                e_limit: params.e_limit,
                w_grid: params.w_grid,
                p_d_min: params.p_d_min,
                p_d_max: params.p_d_max,
                w_service: params.w_service,
            },
            &mut self.oracle_wallet,
            slot,
        );
        let chain = &self.nodes[0].chain;
        submit_transaction(&mut self.pool, txn, chain)?;
        Ok(params)
    }

    /// Execute the full step 2-6 cycle for `slot`. On error, all chains
    /// and nonces are left as they were.
    pub fn run_slot(&mut self, slot: u64) -> Result<SlotOutcome, ProtocolError> {
        if slot != self.next_slot {
            return Err(ProtocolError::StaleSlot {
                got: slot,
                next: self.next_slot,
            });
        }
        // Fail fast before any state is touched.
        self.feed.params_at(slot)?;
        self.pool.open_slot(slot);

        match self.run_slot_inner(slot) {
            Ok(outcome) => {
                self.next_slot += 1;
                Ok(outcome)
            }
            Err(e) => {
                self.rollback_slot();
                Err(e)
            }
        }
    }

    fn run_slot_inner(&mut self, slot: u64) -> Result<SlotOutcome, ProtocolError> {
        // Departures, then arrivals, at the slot boundary.
        for ev_idx in 0..self.evs.len() {
            if self.evs[ev_idx].session_node.is_some() && self.evs[ev_idx].departure_slot <= slot {
                self.unplug(ev_idx);
            }
        }
        for ev_idx in 0..self.evs.len() {
            let ev = &self.evs[ev_idx];
            if ev.session_node.is_none() && ev.arrival_slot <= slot && slot < ev.departure_slot {
                if let Some(node_idx) = self.nodes.iter().position(|n| n.plugged_ev.is_none()) {
                    self.plug_in(node_idx, ev_idx, slot)?;
                }
            }
        }

        // Step 2: signed info transfer for every live session.
        for ev_idx in 0..self.evs.len() {
            if self.evs[ev_idx].session_node.is_some() {
                self.transfer_info(ev_idx, slot)?;
            }
        }

        // Step 3: oracle assimilation.
        let params = self.assimilate_data(slot)?;

        // Step 4: capacity-weighted distributed price search.
        let fleet = self.plugged_fleet();
        let solution = distributed_price_search(&mut self.nodes, &fleet, &params)?;

        // Dispatch and settlement transactions, one pair per session.
        let mut dispatches = Vec::new();
        for ev_idx in 0..self.evs.len() {
            if self.evs[ev_idx].session_node.is_none() {
                continue;
            }
            let ev_id = self.evs[ev_idx].ev_id;
            // Decisions are sorted by ev_id.
            let decision = solution
                .decisions
                .binary_search_by_key(&ev_id, |(id, _)| *id)
                .map(|i| solution.decisions[i].1)
                .map_err(|_| ProtocolError::Validation(format!("no decision for ev {ev_id}")))?;
            let payment = match decision.mode {
                FollowerMode::Charge => params.p_c() * params.e0 * decision.x,
                FollowerMode::Discharge => solution.p_d_star * params.e0 * decision.x,
                FollowerMode::Idle => params.p_delay,
            };
            dispatches.push((ev_idx, decision.x, payment));
        }

        let proposal_txn = Transaction::signed(
            TxPayload::SolutionProposal {
                p_d_star: solution.p_d_star,
                r_service: solution.breakdown.r_service,
                r_grid_v2g: solution.breakdown.r_grid_v2g,
                c_v2g: solution.breakdown.c_v2g,
                c_limit: solution.breakdown.c_limit,
                total: solution.breakdown.total,
            },
            &mut self.eva.wallet,
            slot,
        );
        let chain0 = self.nodes[0].chain.clone();
        submit_transaction(&mut self.pool, proposal_txn, &chain0)?;
        for &(ev_idx, x, payment) in &dispatches {
            let ev_id = self.evs[ev_idx].ev_id;
            let dispatch = Transaction::signed(
                TxPayload::Dispatch { ev_id, x, payment },
                &mut self.eva.wallet,
                slot,
            );
            submit_transaction(&mut self.pool, dispatch, &chain0)?;
            let ev = &mut self.evs[ev_idx];
            let settlement = Transaction::signed(
                TxPayload::Settlement {
                    ev_id,
                    payment,
                    balance_after: ev.balance - payment,
                },
                &mut ev.wallet,
                slot,
            );
            submit_transaction(&mut self.pool, settlement, &chain0)?;
        }

        // Step 5: vote and commit one block with the whole slot.
        let txns = self.pool.take_pending();
        let block = commit_block(&mut self.nodes, txns, &fleet, &params, &solution, slot)?;

        // Settlement: apply dispatches to batteries and wallets.
        let mut charge_kw = 0.0;
        let mut discharge_kw = 0.0;
        let mut outcome_dispatches = Vec::with_capacity(dispatches.len());
        for (ev_idx, x, payment) in dispatches {
            let ev = &mut self.evs[ev_idx];
            let cap = ev.charge_state.capacity;
            ev.charge_state.soc = ((ev.charge_state.soc * cap + params.e0 * x) / cap).clamp(0.0, 1.0);
            ev.balance -= payment;
            self.eva.ev_flow += payment;
            if x > 0.0 {
                charge_kw += params.e0 * x / SLOT_HOURS;
            } else {
                discharge_kw += params.e0 * (-x) / SLOT_HOURS;
            }
            outcome_dispatches.push((ev.ev_id, x, payment));
        }
        self.eva.grid_inflow += solution.breakdown.r_grid_v2g;
        self.eva.penalty_outflow += solution.breakdown.c_limit;

        // Step 6: light clients append the new header and re-verify.
        for ev_idx in 0..self.evs.len() {
            if let Some(node_idx) = self.evs[ev_idx].session_node {
                let chain = self.nodes[node_idx].chain.clone();
                sync_light_client(&mut self.evs[ev_idx], &chain)?;
            }
        }

        Ok(SlotOutcome {
            slot,
            p_d_star: solution.p_d_star,
            breakdown: solution.breakdown,
            dispatches: outcome_dispatches,
            charge_kw,
            discharge_kw,
            block_height: block.header.height,
        })
    }

    /// Battery states of all plugged EVs, in ascending ev_id order.
    pub fn plugged_fleet(&self) -> Vec<EvChargeState> {
        let mut fleet: Vec<EvChargeState> = self
            .evs
            .iter()
            .filter(|ev| ev.session_node.is_some())
            .map(|ev| ev.charge_state.clone())
            .collect();
        fleet.sort_by_key(|ev| ev.ev_id);
        fleet
    }

    /// Abandon the open slot: drop pending transactions and re-align
    /// every wallet's nonce with the restored registry.
    fn rollback_slot(&mut self) {
        self.pool.rollback_slot();
        for ev in &mut self.evs {
            ev.wallet.next_nonce = self.pool.next_nonce(&ev.wallet.wallet_id);
        }
        self.oracle_wallet.next_nonce = self.pool.next_nonce(&self.oracle_wallet.wallet_id);
        self.eva.wallet.next_nonce = self.pool.next_nonce(&self.eva.wallet.wallet_id);
    }
}

/// Reject follower parameters that violate the battery constraints.
pub fn validate_ev_info(payload: &TxPayload) -> Result<(), ProtocolError> {
    match payload {
        TxPayload::EvInfo {
            soc,
            capacity,
            beta,
            ..
        } => {
            if !(0.0..=1.0).contains(soc) {
                return Err(ProtocolError::Validation(format!("soc {soc} outside [0,1]")));
            }
            if *capacity <= 0.0 || *beta <= 0.0 {
                return Err(ProtocolError::Validation(
                    "capacity and beta must be positive".into(),
                ));
            }
            Ok(())
        }
        other => Err(ProtocolError::Validation(format!(
            "expected EvInfo, got {}",
            other.kind()
        ))),
    }
}

/// Partition the price grid by node compute capacity, search each
/// subrange (in parallel), and reduce deterministically. Stores each
/// node's subrange best for the subsequent vote.
pub fn distributed_price_search(
    nodes: &mut [ScpNode],
    fleet: &[EvChargeState],
    params: &MarketParams,
) -> Result<LeaderSolution, ProtocolError> {
    if nodes.is_empty() {
        return Err(ProtocolError::NoFunctionalNodes);
    }
    params.validate()?;
    let grid = price_grid(params.p_d_min, params.p_d_max, params.epsilon)?;
    let capacities: Vec<f64> = nodes.iter().map(|n| n.compute_capacity).collect();
    let ranges = partition_grid(grid.len(), &capacities)?;
    let locals: Vec<Option<SearchResult>> = ranges
        .into_par_iter()
        .map(|range| leader_grid_search(fleet, params, &grid, Some(range)))
        .collect();
    for (node, local) in nodes.iter_mut().zip(&locals) {
        node.local_best = *local;
    }
    let best = reduce_search_results(locals.into_iter().flatten())
        .expect("price grid is non-empty");
    Ok(solution_at(fleet, params, best.best_price))
}

/// Each node re-validates the proposed solution against its own
/// subrange best and, if satisfied, signs the header digest.
pub fn collect_votes(
    nodes: &[ScpNode],
    fleet: &[EvChargeState],
    params: &MarketParams,
    proposal: &LeaderSolution,
    header: &BlockHeader,
) -> Vec<(String, Vec<u8>)> {
    // The re-evaluation is the same pure function on every node, so it
    // is computed once and compared against each node's local best.
    let reevaluated = eva_revenue(fleet, params, proposal.p_d_star).total;
    let digest = header.digest();
    nodes
        .iter()
        .filter(|node| match node.local_best {
            Some(local) => reevaluated >= local.best_total,
            None => true,
        })
        .map(|node| (node.node_id.clone(), sign(&node.wallet.signing_key, &digest)))
        .collect()
}

/// Commit one block carrying the whole slot to every node's chain,
/// subject to strict-majority approval. The proposer rotates
/// round-robin by slot.
pub fn commit_block(
    nodes: &mut [ScpNode],
    txns: Vec<Transaction>,
    fleet: &[EvChargeState],
    params: &MarketParams,
    solution: &LeaderSolution,
    slot: u64,
) -> Result<Arc<ledger::Block>, ProtocolError> {
    if nodes.is_empty() {
        return Err(ProtocolError::NoFunctionalNodes);
    }
    let proposer_idx = (slot % nodes.len() as u64) as usize;
    let proposer = nodes[proposer_idx].node_id.clone();
    let tip = nodes[proposer_idx].chain.tip().header.clone();
    let header = BlockHeader {
        height: tip.height + 1,
        slot,
        prev_hash: tip.digest(),
        payload_hash: ledger::payload_digest(&txns),
        proposer: proposer.clone(),
    };
    let votes = collect_votes(nodes, fleet, params, solution, &header);
    let quorum = nodes[proposer_idx].chain.registry.quorum();
    if votes.len() < quorum {
        return Err(ProtocolError::InsufficientVotes {
            got: votes.len(),
            nodes: nodes.len(),
        });
    }
    let block = append_block(&mut nodes[proposer_idx].chain, txns, &proposer, votes, slot)?;
    for (idx, node) in nodes.iter_mut().enumerate() {
        if idx != proposer_idx {
            node.chain.append(Arc::clone(&block))?;
        }
    }
    Ok(block)
}

/// Append any headers the light client is missing and re-verify its
/// header chain.
pub fn sync_light_client(ev: &mut LightClientEv, chain: &Chain) -> Result<(), ProtocolError> {
    for block in &chain.blocks[ev.headers.len()..] {
        ev.headers.push(block.header.clone());
    }
    if !verify_header_chain(&ev.headers) {
        return Err(ProtocolError::Validation(format!(
            "ev {} header chain failed verification",
            ev.ev_id
        )));
    }
    Ok(())
}

/// Build a per-slot oracle feed from tariff and demand series plus the
/// static game constants. The discharging floor and the penalty factor
/// scale with the real-time price.
pub struct FeedSpec<'a> {
    pub tariff: &'a crate::fleet::PriceSchedule,
    pub aux: &'a crate::fleet::AuxDemandProfile,
    pub w_service: f64,
    pub w_grid: f64,
    pub p_delay: f64,
    pub e0: f64,
    pub epsilon: f64,
    pub p_d_min_factor: f64,
    pub p_d_max: f64,
    pub delta_factor: f64,
}

pub fn build_feed(spec: &FeedSpec, horizon: u64) -> Result<OracleFeed, ProtocolError> {
    let mut params = Vec::with_capacity(horizon as usize);
    for slot in 0..horizon {
        let (p_real_time, _) = spec.tariff.price_at(slot);
        let e_limit = spec
            .aux
            .at(slot)
            .map_err(|_| ProtocolError::MissingFeed(slot))?;
        let p = MarketParams {
            p_real_time,
            w_service: spec.w_service,
            w_grid: spec.w_grid,
            p_delay: spec.p_delay,
            p_d_min: -spec.p_d_min_factor * p_real_time,
            p_d_max: spec.p_d_max,
            e0: spec.e0,
            delta: spec.delta_factor * p_real_time,
            epsilon: spec.epsilon,
            e_limit,
        };
        p.validate()?;
        params.push(p);
    }
    Ok(OracleFeed::new(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{AuxDemandProfile, PriceSchedule};
    use crate::ledger::verify_chain;

    fn constant_feed(horizon: u64, e_limit: f64) -> OracleFeed {
        let params = MarketParams {
            p_real_time: 0.26,
            w_service: 0.5,
            w_grid: 0.792,
            p_delay: -0.1,
            p_d_min: -0.78,
            p_d_max: 0.0,
            e0: 3.75,
            delta: 0.52,
            epsilon: 0.01,
            e_limit,
        };
        OracleFeed::new(vec![params; horizon as usize])
    }

    fn ev_init(ev_id: u64, initial_kwh: f64, arrival: u64, departure: u64) -> EvInit {
        EvInit {
            record: EvRecord {
                ev_id,
                battery_kwh: 64.0,
                initial_kwh,
                arrival_slot: arrival,
                departure_slot: departure,
            },
            beta: 0.16,
            a: -0.01,
            u_idle: 0.0,
        }
    }

    fn small_world(n_nodes: usize, evs: Vec<EvInit>, horizon: u64) -> World {
        World::new(&vec![1.0; n_nodes], evs, constant_feed(horizon, 0.0), 42).unwrap()
    }

    #[test]
    fn empty_world_slot_commits_block() {
        let mut world = small_world(1, Vec::new(), 4);
        let outcome = world.run_slot(0).unwrap();
        assert_eq!(outcome.charge_kw, 0.0);
        assert_eq!(outcome.discharge_kw, 0.0);
        assert_eq!(outcome.p_d_star, -0.78);
        assert_eq!(outcome.block_height, 1);
        verify_chain(&world.nodes[0].chain).unwrap();
    }

    #[test]
    fn rerunning_slot_is_stale() {
        let mut world = small_world(1, Vec::new(), 4);
        world.run_slot(0).unwrap();
        assert!(matches!(
            world.run_slot(0),
            Err(ProtocolError::StaleSlot { got: 0, next: 1 })
        ));
    }

    #[test]
    fn slot_beyond_horizon_is_missing_feed() {
        let mut world = small_world(1, Vec::new(), 2);
        world.run_slot(0).unwrap();
        world.run_slot(1).unwrap();
        assert!(matches!(world.run_slot(2), Err(ProtocolError::MissingFeed(2))));
    }

    #[test]
    fn occupied_point_rejects_second_ev() {
        let mut world = small_world(1, vec![ev_init(1, 32.0, 0, 10), ev_init(2, 32.0, 0, 10)], 4);
        world.pool.open_slot(0);
        world.plug_in(0, 0, 0).unwrap();
        assert!(matches!(
            world.plug_in(0, 1, 0),
            Err(ProtocolError::OccupiedPoint(_))
        ));
    }

    #[test]
    fn wrong_wallet_is_identity_failure() {
        let mut world = small_world(2, vec![ev_init(1, 32.0, 0, 10)], 4);
        world.pool.open_slot(0);
        // Corrupt the EV's signing key so it no longer matches the
        // registered verify key.
        world.evs[0].wallet.signing_key[0] ^= 1;
        assert!(matches!(
            world.plug_in(0, 0, 0),
            Err(ProtocolError::IdentityFailure(1))
        ));
    }

    #[test]
    fn ev_info_validation_rejects_bad_soc() {
        let payload = TxPayload::EvInfo {
            ev_id: 1,
            soc: 1.3,
            capacity: 64.0,
            beta: 0.16,
            u_idle: 0.0,
            a: -0.01,
        };
        assert!(matches!(
            validate_ev_info(&payload),
            Err(ProtocolError::Validation(_))
        ));
    }

    #[test]
    fn one_ev_slot_matches_hand_fixture() {
        // soc = 0.2 at p_c = 0.76 charges x = w/(p_c ln2) - 1.
        let mut world = small_world(1, vec![ev_init(1, 12.8, 0, 10)], 4);
        let outcome = world.run_slot(0).unwrap();
        let (ev_id, x, payment) = outcome.dispatches[0];
        assert_eq!(ev_id, 1);
        assert!((x - 0.51863).abs() < 1e-4);
        assert!((payment - 0.76 * 3.75 * x).abs() < 1e-12);
        assert!((payment - 1.4781).abs() < 1e-3);
        let ev = &world.evs[0];
        assert!((ev.charge_state.soc - 0.23039).abs() < 1e-4);
        assert!((ev.balance + payment).abs() < 1e-12);
    }

    #[test]
    fn idle_ev_is_credited_delay_fee() {
        // High charging price and a tight discharging floor leave the
        // EV idle.
        let params = MarketParams {
            p_real_time: 99.5,
            w_service: 0.5,
            w_grid: 0.792,
            p_delay: -0.1,
            p_d_min: -0.001,
            p_d_max: -0.001,
            e0: 3.75,
            delta: 0.0,
            epsilon: 0.01,
            e_limit: 0.0,
        };
        let feed = OracleFeed::new(vec![params]);
        let mut world = World::new(&[1.0], vec![ev_init(1, 32.0, 0, 10)], feed, 42).unwrap();
        let outcome = world.run_slot(0).unwrap();
        assert_eq!(outcome.dispatches[0].1, 0.0);
        assert!((world.evs[0].balance - 0.1).abs() < 1e-12);
        assert!((world.eva.ev_flow + 0.1).abs() < 1e-12);
    }

    #[test]
    fn chains_identical_after_each_slot() {
        let evs = vec![
            ev_init(1, 12.8, 0, 10),
            ev_init(2, 51.2, 0, 10),
            ev_init(3, 32.0, 2, 10),
        ];
        let mut world = small_world(4, evs, 6);
        for slot in 0..6 {
            world.run_slot(slot).unwrap();
            let tip = world.nodes[0].chain.tip().header.digest();
            for node in &world.nodes[1..] {
                assert_eq!(node.chain.tip().header.digest(), tip);
                assert_eq!(node.chain.blocks.len(), world.nodes[0].chain.blocks.len());
            }
        }
        for node in &world.nodes {
            verify_chain(&node.chain).unwrap();
        }
    }

    #[test]
    fn distributed_search_matches_single_node() {
        let feed = constant_feed(1, 10.0);
        let params = feed.params_at(0).unwrap().clone();
        let fleet: Vec<EvChargeState> = (1..=30)
            .map(|i| EvChargeState {
                ev_id: i,
                capacity: 64.0,
                soc: 0.03 * i as f64,
                beta: 0.16,
                a: -0.01,
                u_idle: 0.0,
            })
            .collect();
        let mut single = small_world(1, Vec::new(), 1).nodes;
        let lone = distributed_price_search(&mut single, &fleet, &params).unwrap();
        let mut eight = small_world(8, Vec::new(), 1).nodes;
        let spread = distributed_price_search(&mut eight, &fleet, &params).unwrap();
        assert_eq!(lone.p_d_star, spread.p_d_star);
        assert_eq!(lone.breakdown, spread.breakdown);
    }

    #[test]
    fn zero_evs_price_falls_to_floor_with_penalty() {
        let feed = constant_feed(1, 20.0);
        let params = feed.params_at(0).unwrap().clone();
        let mut nodes = small_world(3, Vec::new(), 1).nodes;
        let solution = distributed_price_search(&mut nodes, &[], &params).unwrap();
        assert_eq!(solution.p_d_star, params.p_d_min);
        assert!((solution.breakdown.total + 20.0 * 0.52).abs() < 1e-12);
    }

    #[test]
    fn byzantine_proposal_is_rejected() {
        let evs = vec![ev_init(1, 12.8, 0, 10), ev_init(2, 57.6, 0, 10)];
        let mut world = small_world(3, evs, 2);
        world.run_slot(0).unwrap();

        // Prepare slot 1 state by hand, then inject an inferior price.
        world.pool.open_slot(1);
        let params = world.feed.params_at(1).unwrap().clone();
        let fleet = world.plugged_fleet();
        let honest = distributed_price_search(&mut world.nodes, &fleet, &params).unwrap();
        let mut falsified = solution_at(&fleet, &params, params.p_d_max);
        // Only meaningful if the forged price really is worse.
        assert!(falsified.breakdown.total < honest.breakdown.total);
        falsified.p_d_star = params.p_d_max;
        let result = commit_block(&mut world.nodes, Vec::new(), &fleet, &params, &falsified, 1);
        assert!(matches!(
            result,
            Err(ProtocolError::InsufficientVotes { .. })
        ));
        world.pool.rollback_slot();

        // The honest proposal still commits.
        let txns = world.pool.take_pending();
        commit_block(&mut world.nodes, txns, &fleet, &params, &honest, 1).unwrap();
        for node in &world.nodes {
            verify_chain(&node.chain).unwrap();
        }
    }

    #[test]
    fn failed_slot_leaves_chains_unchanged() {
        let mut world = small_world(2, vec![ev_init(1, 12.8, 0, 10)], 1);
        world.run_slot(0).unwrap();
        let heights: Vec<usize> = world.nodes.iter().map(|n| n.chain.blocks.len()).collect();
        let nonce = world.evs[0].wallet.next_nonce;
        assert!(world.run_slot(1).is_err()); // beyond horizon
        assert_eq!(
            heights,
            world
                .nodes
                .iter()
                .map(|n| n.chain.blocks.len())
                .collect::<Vec<_>>()
        );
        assert_eq!(world.evs[0].wallet.next_nonce, nonce);
    }

    #[test]
    fn light_clients_track_headers() {
        let evs = vec![ev_init(1, 12.8, 0, 3), ev_init(2, 32.0, 2, 6)];
        let mut world = small_world(2, evs, 6);
        for slot in 0..6 {
            world.run_slot(slot).unwrap();
        }
        let full: Vec<BlockHeader> = world.nodes[0].chain.headers();
        for ev in &world.evs {
            assert!(verify_header_chain(&ev.headers));
            assert_eq!(&full[..ev.headers.len()], ev.headers.as_slice());
            assert!(ev.headers.len() > 1);
        }
    }

    #[test]
    fn energy_and_money_conservation_per_slot() {
        let evs = vec![
            ev_init(1, 6.4, 0, 12),
            ev_init(2, 32.0, 0, 12),
            ev_init(3, 57.6, 0, 12),
        ];
        let mut world = small_world(3, evs, 12);
        for slot in 0..12 {
            let socs: Vec<f64> = world.evs.iter().map(|e| e.charge_state.soc).collect();
            let balances: Vec<f64> = world.evs.iter().map(|e| e.balance).collect();
            let eva_flow = world.eva.ev_flow;
            let outcome = world.run_slot(slot).unwrap();
            let params = world.feed.params_at(slot).unwrap();
            let mut total_payment = 0.0;
            for (ev_id, x, payment) in &outcome.dispatches {
                let idx = world.evs.iter().position(|e| e.ev_id == *ev_id).unwrap();
                let cap = world.evs[idx].charge_state.capacity;
                let delta_soc = world.evs[idx].charge_state.soc - socs[idx];
                assert!(
                    (delta_soc * cap - params.e0 * x).abs() < 1e-12,
                    "energy mismatch for ev {ev_id}"
                );
                assert!((balances[idx] - payment - world.evs[idx].balance).abs() < 1e-12);
                total_payment += payment;
            }
            assert!((world.eva.ev_flow - eva_flow - total_payment).abs() < 1e-9);
        }
    }

    #[test]
    fn feed_builder_applies_price_scaling() {
        let tariff = PriceSchedule::shenzhen();
        let aux = AuxDemandProfile::synthetic(96, 50.0, 1);
        let spec = FeedSpec {
            tariff: &tariff,
            aux: &aux,
            w_service: 0.5,
            w_grid: 0.792,
            p_delay: -0.1,
            e0: 3.75,
            epsilon: 0.01,
            p_d_min_factor: 3.0,
            p_d_max: 0.0,
            delta_factor: 2.0,
        };
        let feed = build_feed(&spec, 96).unwrap();
        // Valley slot: p_d_min = -3 * 0.26.
        let p = feed.params_at(0).unwrap();
        assert!((p.p_d_min + 0.78).abs() < 1e-12);
        assert!((p.delta - 0.52).abs() < 1e-12);
        // Peak slot 10:00-12:00: p_real_time = 1.12.
        let p = feed.params_at(40).unwrap();
        assert!((p.p_real_time - 1.12).abs() < 1e-12);
        assert!((p.p_d_min + 3.36).abs() < 1e-12);
    }
}
