//! Horizon engine: run the trading protocol over all slots, compute
//! the uncoordinated plug-and-charge baseline, and aggregate the
//! per-slot and per-EV series into a report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::fleet::{
    generate_fleet, parse_fleet_csv, AuxDemandProfile, EvRecord, FleetError, FleetGenConfig,
    PriceSchedule, Tier, SLOT_HOURS,
};
use crate::ledger::{verify_chain, Chain};
use crate::protocol::{build_feed, EvInit, FeedSpec, ProtocolError, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("slot {slot}: {source}")]
    Slot {
        slot: u64,
        #[source]
        source: ProtocolError,
    },
    #[error("reports come from different configurations")]
    ConfigMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Static game constants, defaulting to the case-study values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConstants {
    /// Auxiliary-service price, CNY/kWh.
    pub w_grid: f64,
    /// Charging service fee, CNY/kWh.
    pub w_service: f64,
    /// Idle fee per slot, CNY (negative: paid to the EV).
    pub p_delay: f64,
    /// Idle utility.
    pub u_idle: f64,
    /// Willingness constant.
    pub beta: f64,
    /// Battery degradation coefficient, CNY/kWh.
    pub a: f64,
    /// Standard trade quantity, kWh.
    pub e0: f64,
    /// Price-search precision, CNY/kWh.
    pub epsilon: f64,
    /// p_d_min = -p_d_min_factor * p_real_time.
    pub p_d_min_factor: f64,
    /// Upper discharging price bound, <= 0.
    pub p_d_max: f64,
    /// delta = delta_factor * p_real_time.
    pub delta_factor: f64,
}

impl Default for GameConstants {
    fn default() -> Self {
        Self {
            w_grid: 0.792,
            w_service: 0.5,
            p_delay: -0.1,
            u_idle: 0.0,
            beta: 0.16,
            a: -0.01,
            e0: 3.75,
            epsilon: 0.01,
            p_d_min_factor: 3.0,
            p_d_max: 0.0,
            delta_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FleetSource {
    File {
        path: PathBuf,
    },
    Inline {
        records: Vec<EvRecord>,
    },
    Synthetic {
        n: usize,
        seed: u64,
        #[serde(default)]
        no_jitter: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TariffSource {
    Shenzhen,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxSource {
    File { path: PathBuf },
    Synthetic { peak_kwh: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScpConfig {
    /// Number of charging points; `None` means one per EV.
    pub count: Option<usize>,
    /// Compute weights per point; `None` means uniform.
    pub capacities: Option<Vec<f64>>,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            count: None,
            capacities: None,
        }
    }
}

/// Full scenario description; the JSON config document mirrors this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// First simulated slot; lets a day anchor somewhere other than
    /// midnight (28 = 07:00). The tariff stays wall-clock aligned.
    #[serde(default)]
    pub start_slot: u64,
    #[serde(default = "default_horizon")]
    pub horizon_slots: u64,
    pub fleet: FleetSource,
    #[serde(default = "default_tariff")]
    pub tariff: TariffSource,
    pub aux_demand: AuxSource,
    #[serde(default)]
    pub constants: GameConstants,
    #[serde(default)]
    pub scp: ScpConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> u64 {
    96
}

fn default_tariff() -> TariffSource {
    TariffSource::Shenzhen
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Fingerprint binding reports to the configuration that produced
    /// them.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }

    /// Load the referenced inputs. Relative paths resolve against
    /// `base`.
    pub fn resolve(&self, base: &Path) -> Result<ResolvedScenario, SimError> {
        let records = match &self.fleet {
            FleetSource::File { path } => {
                let text = std::fs::read_to_string(base.join(path))?;
                parse_fleet_csv(&text)?
            }
            FleetSource::Inline { records } => {
                for r in records {
                    r.validate()?;
                }
                records.clone()
            }
            FleetSource::Synthetic { n, seed, no_jitter } => {
                let gen = if *no_jitter {
                    FleetGenConfig::no_jitter()
                } else {
                    FleetGenConfig::default()
                };
                generate_fleet(*n, *seed, &gen)?
            }
        };
        let tariff = match &self.tariff {
            TariffSource::Shenzhen => PriceSchedule::shenzhen(),
            TariffSource::File { path } => {
                let text = std::fs::read_to_string(base.join(path))?;
                PriceSchedule::from_csv(&text)?
            }
        };
        let end_slot = self.start_slot + self.horizon_slots;
        let aux = match &self.aux_demand {
            AuxSource::File { path } => {
                let text = std::fs::read_to_string(base.join(path))?;
                AuxDemandProfile::from_csv(&text, end_slot)?
            }
            AuxSource::Synthetic { peak_kwh, seed } => {
                AuxDemandProfile::synthetic(end_slot, *peak_kwh, *seed)
            }
        };
        let scp_capacities = match (&self.scp.count, &self.scp.capacities) {
            (_, Some(caps)) => {
                if let Some(count) = self.scp.count {
                    if caps.len() != count {
                        return Err(SimError::Config(format!(
                            "scp.capacities has {} entries but scp.count is {count}",
                            caps.len()
                        )));
                    }
                }
                caps.clone()
            }
            (Some(count), None) => vec![1.0; (*count).max(1)],
            (None, None) => vec![1.0; records.len().max(1)],
        };
        if scp_capacities.is_empty() {
            return Err(SimError::Config("at least one charging point required".into()));
        }
        Ok(ResolvedScenario {
            records,
            tariff,
            aux,
            scp_capacities,
        })
    }
}

/// A scenario with all external inputs loaded.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub records: Vec<EvRecord>,
    pub tariff: PriceSchedule,
    pub aux: AuxDemandProfile,
    pub scp_capacities: Vec<f64>,
}

/// One row of the per-slot report series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub slot: u64,
    pub p_real_time: f64,
    pub p_d_star: f64,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub r_service: f64,
    pub r_grid_v2g: f64,
    pub c_v2g: f64,
    pub c_limit: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvTotals {
    pub ev_id: u64,
    pub energy_charged_kwh: f64,
    pub energy_discharged_kwh: f64,
    pub net_cost_cny: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Charging payments divided by charged energy, CNY/kWh.
    pub mean_charging_cost_cny_per_kwh: f64,
    /// Shares of charged energy by tariff tier.
    pub valley_share: f64,
    pub normal_share: f64,
    pub peak_share: f64,
    pub total_eva_profit_cny: f64,
    pub total_charged_kwh: f64,
    pub total_discharged_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub slots: Vec<SlotRow>,
    pub per_ev: Vec<EvTotals>,
    pub summary: Summary,
}

/// A completed scheme run: the report plus one node's copy of the
/// ledger (all copies are identical).
#[derive(Debug)]
pub struct SchemeRun {
    pub report: RunReport,
    pub chain: Chain,
}

struct SeriesAccumulator {
    slots: Vec<SlotRow>,
    charged: Vec<(u64, f64)>,    // (ev_id, kWh) accumulators
    discharged: Vec<(u64, f64)>,
    net_cost: Vec<(u64, f64)>,
    charge_payment_total: f64,
    tier_energy: [f64; 3],
}

impl SeriesAccumulator {
    fn new(records: &[EvRecord]) -> Self {
        let mut ids: Vec<u64> = records.iter().map(|r| r.ev_id).collect();
        ids.sort_unstable();
        Self {
            slots: Vec::new(),
            charged: ids.iter().map(|&id| (id, 0.0)).collect(),
            discharged: ids.iter().map(|&id| (id, 0.0)).collect(),
            net_cost: ids.iter().map(|&id| (id, 0.0)).collect(),
            charge_payment_total: 0.0,
            tier_energy: [0.0; 3],
        }
    }

    fn add_dispatch(&mut self, ev_id: u64, energy_kwh: f64, payment: f64, tier: Tier) {
        let idx = self
            .charged
            .binary_search_by_key(&ev_id, |(id, _)| *id)
            .expect("dispatch for known ev");
        if energy_kwh > 0.0 {
            self.charged[idx].1 += energy_kwh;
            self.charge_payment_total += payment;
            self.tier_energy[tier_index(tier)] += energy_kwh;
        } else if energy_kwh < 0.0 {
            self.discharged[idx].1 += -energy_kwh;
        }
        self.net_cost[idx].1 += payment;
    }

    fn finish(self, config_digest: String, eva_profit: f64) -> RunReport {
        let total_charged: f64 = self.charged.iter().map(|(_, e)| e).sum();
        let total_discharged: f64 = self.discharged.iter().map(|(_, e)| e).sum();
        let mean_cost = if total_charged > 0.0 {
            self.charge_payment_total / total_charged
        } else {
            0.0
        };
        let share = |i: usize| {
            if total_charged > 0.0 {
                self.tier_energy[i] / total_charged
            } else {
                0.0
            }
        };
        let per_ev = self
            .charged
            .iter()
            .zip(&self.discharged)
            .zip(&self.net_cost)
            .map(|(((id, c), (_, d)), (_, n))| EvTotals {
                ev_id: *id,
                energy_charged_kwh: *c,
                energy_discharged_kwh: *d,
                net_cost_cny: *n,
            })
            .collect();
        RunReport {
            config_digest,
            slots: self.slots,
            per_ev,
            summary: Summary {
                mean_charging_cost_cny_per_kwh: mean_cost,
                valley_share: share(0),
                normal_share: share(1),
                peak_share: share(2),
                total_eva_profit_cny: eva_profit,
                total_charged_kwh: total_charged,
                total_discharged_kwh: total_discharged,
            },
        }
    }
}

fn tier_index(tier: Tier) -> usize {
    match tier {
        Tier::Valley => 0,
        Tier::Normal => 1,
        Tier::Peak => 2,
    }
}

/// Run the blockchain-coordinated scheme over the whole horizon.
/// Deterministic under the config; all node ledgers verify at the end.
pub fn run_horizon(config: &ScenarioConfig, base: &Path) -> Result<SchemeRun, SimError> {
    let scenario = config.resolve(base)?;
    let feed = build_feed(
        &FeedSpec {
            tariff: &scenario.tariff,
            aux: &scenario.aux,
            w_service: config.constants.w_service,
            w_grid: config.constants.w_grid,
            p_delay: config.constants.p_delay,
            e0: config.constants.e0,
            epsilon: config.constants.epsilon,
            p_d_min_factor: config.constants.p_d_min_factor,
            p_d_max: config.constants.p_d_max,
            delta_factor: config.constants.delta_factor,
        },
        config.start_slot + config.horizon_slots,
    )?;
    let evs: Vec<EvInit> = scenario
        .records
        .iter()
        .map(|r| EvInit {
            record: r.clone(),
            beta: config.constants.beta,
            a: config.constants.a,
            u_idle: config.constants.u_idle,
        })
        .collect();
    let mut world = World::new(&scenario.scp_capacities, evs, feed, config.seed)?;
    world.fast_forward(config.start_slot)?;

    let mut acc = SeriesAccumulator::new(&scenario.records);
    for slot in config.start_slot..config.start_slot + config.horizon_slots {
        let outcome = world
            .run_slot(slot)
            .map_err(|source| SimError::Slot { slot, source })?;
        let (p_real_time, tier) = scenario.tariff.price_at(slot);
        for &(ev_id, x, payment) in &outcome.dispatches {
            acc.add_dispatch(ev_id, config.constants.e0 * x, payment, tier);
        }
        acc.slots.push(SlotRow {
            slot,
            p_real_time,
            p_d_star: outcome.p_d_star,
            charge_kw: outcome.charge_kw,
            discharge_kw: outcome.discharge_kw,
            r_service: outcome.breakdown.r_service,
            r_grid_v2g: outcome.breakdown.r_grid_v2g,
            c_v2g: outcome.breakdown.c_v2g,
            c_limit: outcome.breakdown.c_limit,
            total: outcome.breakdown.total,
        });
    }

    // End-of-run ledger check: one full verification plus tip equality
    // across nodes (blocks are replicated, so the chains are identical
    // by construction; this asserts it).
    verify_chain(&world.nodes[0].chain).map_err(ProtocolError::from)?;
    let tip = world.nodes[0].chain.tip().header.digest();
    for node in &world.nodes[1..] {
        if node.chain.tip().header.digest() != tip {
            return Err(SimError::Config(format!(
                "node {} diverged from the committed chain",
                node.node_id
            )));
        }
    }
    for ev in &world.evs {
        if !crate::ledger::verify_header_chain(&ev.headers) {
            return Err(SimError::Config(format!(
                "ev {} header chain failed verification",
                ev.ev_id
            )));
        }
    }

    let report = acc.finish(config.digest(), world.eva.profit());
    let chain = world.nodes[0].chain.clone();
    Ok(SchemeRun { report, chain })
}

/// Uncoordinated plug-and-charge comparator: every EV charges at full
/// rate from arrival until its battery is full, never discharges, and
/// pays the retail price plus the service fee. No ledger, no pricing
/// game.
pub fn baseline_uncoordinated(config: &ScenarioConfig, base: &Path) -> Result<RunReport, SimError> {
    let scenario = config.resolve(base)?;
    let e0 = config.constants.e0;
    let mut soc: Vec<f64> = scenario
        .records
        .iter()
        .map(|r| r.initial_kwh / r.battery_kwh)
        .collect();
    let mut acc = SeriesAccumulator::new(&scenario.records);
    for slot in config.start_slot..config.start_slot + config.horizon_slots {
        let (p_real_time, tier) = scenario.tariff.price_at(slot);
        let p_c = p_real_time + config.constants.w_service;
        let mut charge_kw = 0.0;
        for (i, r) in scenario.records.iter().enumerate() {
            if !(r.arrival_slot <= slot && slot < r.departure_slot) {
                continue;
            }
            let headroom = (1.0 - soc[i]) * r.battery_kwh / e0;
            let x = headroom.min(1.0);
            if x <= 0.0 {
                continue;
            }
            soc[i] = ((soc[i] * r.battery_kwh + e0 * x) / r.battery_kwh).clamp(0.0, 1.0);
            let payment = p_c * e0 * x;
            acc.add_dispatch(r.ev_id, e0 * x, payment, tier);
            charge_kw += e0 * x / SLOT_HOURS;
        }
        acc.slots.push(SlotRow {
            slot,
            p_real_time,
            p_d_star: 0.0,
            charge_kw,
            discharge_kw: 0.0,
            r_service: 0.0,
            r_grid_v2g: 0.0,
            c_v2g: 0.0,
            c_limit: 0.0,
            total: 0.0,
        });
    }
    Ok(acc.finish(config.digest(), 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Scheme minus baseline mean charging cost, CNY/kWh.
    pub delta_mean_charging_cost: f64,
    /// Scheme minus baseline valley-hour charging energy share.
    pub delta_valley_share: f64,
    pub scheme_mean_charging_cost: f64,
    pub baseline_mean_charging_cost: f64,
    pub scheme_valley_share: f64,
    pub baseline_valley_share: f64,
    pub eva_profit_cny: f64,
}

/// Compare a scheme run against its baseline. Both reports must carry
/// the same config fingerprint.
pub fn compare_reports(scheme: &RunReport, baseline: &RunReport) -> Result<Comparison, SimError> {
    if scheme.config_digest != baseline.config_digest {
        return Err(SimError::ConfigMismatch);
    }
    Ok(Comparison {
        delta_mean_charging_cost: scheme.summary.mean_charging_cost_cny_per_kwh
            - baseline.summary.mean_charging_cost_cny_per_kwh,
        delta_valley_share: scheme.summary.valley_share - baseline.summary.valley_share,
        scheme_mean_charging_cost: scheme.summary.mean_charging_cost_cny_per_kwh,
        baseline_mean_charging_cost: baseline.summary.mean_charging_cost_cny_per_kwh,
        scheme_valley_share: scheme.summary.valley_share,
        baseline_valley_share: baseline.summary.valley_share,
        eva_profit_cny: scheme.summary.total_eva_profit_cny,
    })
}

/// Per-slot report CSV. Column order and names are normative.
pub fn report_to_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "slot,p_real_time,p_d_star,charge_kW,discharge_kW,r_service,r_grid_v2g,c_v2g,c_limit,total\n",
    );
    for row in &report.slots {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.slot,
            row.p_real_time,
            row.p_d_star,
            row.charge_kw,
            row.discharge_kw,
            row.r_service,
            row.r_grid_v2g,
            row.c_v2g,
            row.c_limit,
            row.total
        ));
    }
    out
}
