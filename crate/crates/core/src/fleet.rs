//! Fleet data layer: the EV driving-pattern CSV schema, seeded
//! synthetic fleets, the Shenzhen valley-peak tariff, and the
//! auxiliary-demand profile.
//!
//! Time slots are 15 minutes, 96 per day. Departure times on the next
//! day unwrap to slot + 96.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SLOTS_PER_DAY: u64 = 96;
/// Slot length in hours, for kWh <-> kW conversion.
pub const SLOT_HOURS: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum FleetError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("range error at line {line}: {msg}")]
    Range { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing feed at slot {0}")]
    MissingFeed(u64),
}

/// One EV's driving pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvRecord {
    pub ev_id: u64,
    pub battery_kwh: f64,
    pub initial_kwh: f64,
    pub arrival_slot: u64,
    pub departure_slot: u64,
}

impl EvRecord {
    pub fn validate(&self) -> Result<(), FleetError> {
        if self.battery_kwh <= 0.0 {
            return Err(FleetError::Config(format!(
                "ev {}: battery volume must be positive",
                self.ev_id
            )));
        }
        if self.initial_kwh < 0.0 || self.initial_kwh > self.battery_kwh {
            return Err(FleetError::Config(format!(
                "ev {}: initial battery outside [0, capacity]",
                self.ev_id
            )));
        }
        if self.departure_slot <= self.arrival_slot {
            return Err(FleetError::Config(format!(
                "ev {}: departure must follow arrival",
                self.ev_id
            )));
        }
        Ok(())
    }
}

/// The six published driving-pattern samples.
pub fn sample_fleet() -> Vec<EvRecord> {
    let row = |ev_id, battery_kwh, initial_kwh, arrival_slot, departure_slot| EvRecord {
        ev_id,
        battery_kwh,
        initial_kwh,
        arrival_slot,
        departure_slot,
    };
    vec![
        row(1, 160.0, 57.2, 64, 122),
        row(71, 64.0, 19.9, 71, 162),
        row(74, 65.0, 17.7, 58, 114),
        row(215, 40.0, 26.2, 23, 41),
        row(217, 65.0, 37.1, 0, 48),
        row(486, 32.0, 20.2, 86, 144),
    ]
}

const FLEET_HEADER: &str = "id,battery_kwh,initial_kwh,arrival,departure";

fn parse_time(s: &str, line: usize) -> Result<u64, FleetError> {
    let (next_day, clock) = match s.strip_prefix("next day ") {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let err = |msg: String| FleetError::Parse { line, msg };
    let (h, m) = clock
        .split_once(':')
        .ok_or_else(|| err(format!("bad time {s:?}")))?;
    let h: u64 = h.trim().parse().map_err(|_| err(format!("bad hour in {s:?}")))?;
    let m: u64 = m.trim().parse().map_err(|_| err(format!("bad minute in {s:?}")))?;
    if h > 23 || m > 59 {
        return Err(err(format!("time {s:?} out of range")));
    }
    if m % 15 != 0 {
        return Err(err(format!("time {s:?} not on a 15-minute boundary")));
    }
    let slot = h * 4 + m / 15;
    Ok(if next_day { slot + SLOTS_PER_DAY } else { slot })
}

fn format_time(slot: u64) -> String {
    let day_slot = slot % SLOTS_PER_DAY;
    let clock = format!("{:02}:{:02}", day_slot / 4, (day_slot % 4) * 15);
    if slot >= SLOTS_PER_DAY {
        format!("next day {clock}")
    } else {
        clock
    }
}

/// Parse the fleet CSV (`id,battery_kwh,initial_kwh,arrival,departure`).
pub fn parse_fleet_csv(text: &str) -> Result<Vec<EvRecord>, FleetError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(FleetError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if header.trim() != FLEET_HEADER {
        return Err(FleetError::Parse {
            line: 1,
            msg: format!("expected header {FLEET_HEADER:?}"),
        });
    }
    let mut records = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(FleetError::Parse {
                line,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let err = |msg: String| FleetError::Parse { line, msg };
        let ev_id: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad id {:?}", fields[0])))?;
        let battery_kwh: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad battery volume {:?}", fields[1])))?;
        let initial_kwh: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad initial battery {:?}", fields[2])))?;
        let arrival_slot = parse_time(fields[3], line)?;
        let departure_slot = parse_time(fields[4], line)?;
        if initial_kwh < 0.0 || initial_kwh > battery_kwh {
            return Err(FleetError::Range {
                line,
                msg: format!("initial {initial_kwh} outside [0, {battery_kwh}]"),
            });
        }
        if departure_slot <= arrival_slot {
            return Err(FleetError::Range {
                line,
                msg: "departure must follow arrival".into(),
            });
        }
        records.push(EvRecord {
            ev_id,
            battery_kwh,
            initial_kwh,
            arrival_slot,
            departure_slot,
        });
    }
    Ok(records)
}

/// Serialize records back into the fleet CSV schema.
pub fn serialize_fleet_csv(records: &[EvRecord]) -> String {
    let mut out = String::from(FLEET_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ev_id,
            r.battery_kwh,
            r.initial_kwh,
            format_time(r.arrival_slot),
            format_time(r.departure_slot)
        ));
    }
    out
}

/// Synthesis parameters: an empirical mixture of seed rows plus
/// bounded jitter around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetGenConfig {
    /// Rows the mixture samples from; defaults to the six published
    /// samples.
    pub mixture: Vec<EvRecord>,
    /// Max arrival shift, slots.
    pub arrival_jitter_slots: u64,
    /// Max dwell-time shift, slots.
    pub dwell_jitter_slots: u64,
    /// Relative jitter on the initial battery level.
    pub initial_jitter: f64,
}

impl Default for FleetGenConfig {
    fn default() -> Self {
        Self {
            mixture: sample_fleet(),
            arrival_jitter_slots: 8,
            dwell_jitter_slots: 8,
            initial_jitter: 0.25,
        }
    }
}

impl FleetGenConfig {
    pub fn no_jitter() -> Self {
        Self {
            arrival_jitter_slots: 0,
            dwell_jitter_slots: 0,
            initial_jitter: 0.0,
            ..Self::default()
        }
    }

    fn is_jitter_free(&self) -> bool {
        self.arrival_jitter_slots == 0 && self.dwell_jitter_slots == 0 && self.initial_jitter == 0.0
    }
}

/// Generate `n` EV records, deterministic under `(n, seed, config)`.
/// With zero jitter and `n` equal to the mixture size this reproduces
/// the mixture rows verbatim.
pub fn generate_fleet(n: usize, seed: u64, config: &FleetGenConfig) -> Result<Vec<EvRecord>, FleetError> {
    if config.mixture.is_empty() {
        return Err(FleetError::Config("empty mixture".into()));
    }
    if n == 0 {
        return Err(FleetError::Config("fleet size must be >= 1".into()));
    }
    for row in &config.mixture {
        row.validate()?;
    }
    if config.is_jitter_free() && n == config.mixture.len() {
        return Ok(config.mixture.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let base = &config.mixture[rng.gen_range(0..config.mixture.len())];
        let battery_kwh = base.battery_kwh;
        let initial_kwh = if config.initial_jitter > 0.0 {
            let f = 1.0 + rng.gen_range(-config.initial_jitter..=config.initial_jitter);
            (base.initial_kwh * f).clamp(0.0, battery_kwh)
        } else {
            base.initial_kwh
        };
        let arrival_slot = if config.arrival_jitter_slots > 0 {
            let j = config.arrival_jitter_slots as i64;
            let shifted = base.arrival_slot as i64 + rng.gen_range(-j..=j);
            shifted.clamp(0, SLOTS_PER_DAY as i64 - 1) as u64
        } else {
            base.arrival_slot
        };
        let dwell = base.departure_slot - base.arrival_slot;
        let dwell = if config.dwell_jitter_slots > 0 {
            let j = config.dwell_jitter_slots as i64;
            (dwell as i64 + rng.gen_range(-j..=j)).max(1) as u64
        } else {
            dwell
        };
        records.push(EvRecord {
            ev_id: i as u64 + 1,
            battery_kwh,
            initial_kwh,
            arrival_slot,
            departure_slot: arrival_slot + dwell,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Valley,
    Normal,
    Peak,
}

impl std::str::FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "valley" => Ok(Tier::Valley),
            "normal" | "flat" => Ok(Tier::Normal),
            "peak" => Ok(Tier::Peak),
            other => Err(format!("unknown tier {other:?}")),
        }
    }
}

/// Daily valley-peak tariff, piecewise constant on hour bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSchedule {
    /// (price CNY/kWh, tier) for each of the 96 daily slots.
    slots: Vec<(f64, Tier)>,
}

impl PriceSchedule {
    /// The Shenzhen valley-peak tariff.
    pub fn shenzhen() -> Self {
        Self::from_hour_bands(&[
            (0, 8, 0.26, Tier::Valley),
            (8, 10, 0.66, Tier::Normal),
            (10, 12, 1.12, Tier::Peak),
            (12, 14, 0.66, Tier::Normal),
            (14, 19, 1.12, Tier::Peak),
            (19, 24, 0.66, Tier::Normal),
        ])
        .expect("builtin tariff covers the day")
    }

    /// Build from hour bands; the bands must tile [0, 24).
    pub fn from_hour_bands(bands: &[(u64, u64, f64, Tier)]) -> Result<Self, FleetError> {
        let mut slots = vec![None; SLOTS_PER_DAY as usize];
        for &(start_hour, end_hour, price, tier) in bands {
            if start_hour >= end_hour || end_hour > 24 {
                return Err(FleetError::Config(format!(
                    "bad hour band {start_hour}-{end_hour}"
                )));
            }
            for slot in start_hour * 4..end_hour * 4 {
                if slots[slot as usize].replace((price, tier)).is_some() {
                    return Err(FleetError::Config(format!(
                        "overlapping tariff bands at hour {}",
                        slot / 4
                    )));
                }
            }
        }
        let slots = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or(FleetError::Config(format!("no tariff for slot {i}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { slots })
    }

    /// Parse tariff overrides (`start_hour,end_hour,price,tier`).
    pub fn from_csv(text: &str) -> Result<Self, FleetError> {
        let mut bands = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw == "start_hour,end_hour,price,tier" {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(FleetError::Parse {
                    line,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let err = |msg: String| FleetError::Parse { line, msg };
            bands.push((
                fields[0].parse().map_err(|_| err("bad start hour".into()))?,
                fields[1].parse().map_err(|_| err("bad end hour".into()))?,
                fields[2].parse().map_err(|_| err("bad price".into()))?,
                fields[3].parse::<Tier>().map_err(|e| err(e))?,
            ));
        }
        Self::from_hour_bands(&bands)
    }

    /// Tariff at a slot index; periodic with period 96.
    pub fn price_at(&self, slot: u64) -> (f64, Tier) {
        self.slots[(slot % SLOTS_PER_DAY) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AuxProvenance {
    File,
    Synthetic { seed: u64, peak_kwh: f64 },
}

/// Per-slot auxiliary service demand issued by the grid operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxDemandProfile {
    values: Vec<f64>,
    pub provenance: AuxProvenance,
}

impl AuxDemandProfile {
    /// Parse a `slot,e_limit_kwh` CSV covering `[0, horizon)`.
    pub fn from_csv(text: &str, horizon: u64) -> Result<Self, FleetError> {
        let mut values = vec![None; horizon as usize];
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw == "slot,e_limit_kwh" {
                continue;
            }
            let err = |msg: String| FleetError::Parse { line, msg };
            let (slot, value) = raw
                .split_once(',')
                .ok_or_else(|| err("expected slot,e_limit_kwh".into()))?;
            let slot: u64 = slot.trim().parse().map_err(|_| err("bad slot".into()))?;
            let value: f64 = value.trim().parse().map_err(|_| err("bad value".into()))?;
            if value < 0.0 {
                return Err(FleetError::Range {
                    line,
                    msg: "e_limit must be non-negative".into(),
                });
            }
            if let Some(cell) = values.get_mut(slot as usize) {
                *cell = Some(value);
            }
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or(FleetError::Config(format!("no aux demand for slot {i}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            values,
            provenance: AuxProvenance::File,
        })
    }

    /// Smooth two-hump day shape scaled to `peak_kwh`, with a small
    /// seeded ripple. Deterministic under `seed`.
    pub fn synthetic(horizon: u64, peak_kwh: f64, seed: u64) -> Self {
        let hump = |slot: f64, center: f64, width: f64| {
            let z = (slot - center) / width;
            (-0.5 * z * z).exp()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6175_785f); // "aux_"
        let values = (0..horizon)
            .map(|slot| {
                let day = (slot % SLOTS_PER_DAY) as f64;
                // Morning hump around 10:00 and an evening one around 18:00.
                let base = hump(day, 40.0, 10.0) + 0.8 * hump(day, 72.0, 12.0);
                let ripple = 1.0 + 0.05 * rng.gen_range(-1.0..=1.0);
                (peak_kwh * base * ripple).max(0.0)
            })
            .collect();
        Self {
            values,
            provenance: AuxProvenance::Synthetic { seed, peak_kwh },
        }
    }

    pub fn at(&self, slot: u64) -> Result<f64, FleetError> {
        self.values
            .get(slot as usize)
            .copied()
            .ok_or(FleetError::MissingFeed(slot))
    }

    pub fn horizon(&self) -> u64 {
        self.values.len() as u64
    }
}

/// Serialize an auxiliary-demand profile as `slot,e_limit_kwh`.
pub fn serialize_aux_csv(profile: &AuxDemandProfile) -> String {
    let mut out = String::from("slot,e_limit_kwh\n");
    for slot in 0..profile.horizon() {
        out.push_str(&format!("{},{}\n", slot, profile.at(slot).unwrap()));
    }
    out
}
