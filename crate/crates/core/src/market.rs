//! Stackelberg pricing game between the EV aggregator (leader) and
//! plugged-in EVs (followers).
//!
//! Everything in this module is a pure function of its inputs. Fleet
//! sums run in ascending `ev_id` order so that results are bitwise
//! reproducible regardless of how the caller assembled the fleet, and
//! the subrange reduce in [`reduce_search_results`] is order-fixed for
//! the same reason.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2: f64 = std::f64::consts::LN_2;

/// Willingness w = beta / soc diverges at soc = 0; the divisor is
/// floored here. Discharge at soc = 0 is already infeasible, so the
/// floor only bounds the utility scale.
pub const SOC_FLOOR: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("domain error: {0}")]
    Domain(String),
}

/// One EV's battery and preference state as seen by the game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvChargeState {
    pub ev_id: u64,
    /// Battery capacity in kWh.
    pub capacity: f64,
    /// State of charge in [0, 1].
    pub soc: f64,
    /// Willingness constant, > 0.
    pub beta: f64,
    /// Battery degradation coefficient in CNY/kWh (negative).
    pub a: f64,
    /// Utility of remaining idle.
    pub u_idle: f64,
}

impl EvChargeState {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(0.0..=1.0).contains(&self.soc) {
            return Err(MarketError::Domain(format!(
                "ev {}: soc {} outside [0,1]",
                self.ev_id, self.soc
            )));
        }
        if self.capacity <= 0.0 {
            return Err(MarketError::Domain(format!(
                "ev {}: capacity must be positive",
                self.ev_id
            )));
        }
        if self.beta <= 0.0 {
            return Err(MarketError::Domain(format!(
                "ev {}: beta must be positive",
                self.ev_id
            )));
        }
        Ok(())
    }
}

/// Tariff and game constants for one time slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Retail real-time price, CNY/kWh.
    pub p_real_time: f64,
    /// Charging service fee, CNY/kWh.
    pub w_service: f64,
    /// Auxiliary-service price paid by the grid operator, CNY/kWh.
    pub w_grid: f64,
    /// Idle fee per 15-min slot, CNY (negative as tabulated).
    pub p_delay: f64,
    /// Discharging price bounds, CNY/kWh, p_d_min <= p_d_max <= 0.
    pub p_d_min: f64,
    pub p_d_max: f64,
    /// Standard trade quantity, kWh.
    pub e0: f64,
    /// Penalty factor for missed auxiliary demand, CNY/kWh.
    pub delta: f64,
    /// Price-search precision, CNY/kWh.
    pub epsilon: f64,
    /// Auxiliary service demand, kWh.
    pub e_limit: f64,
}

impl MarketParams {
    /// Effective charging price: retail price plus the service fee.
    pub fn p_c(&self) -> f64 {
        self.p_real_time + self.w_service
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.p_d_min <= self.p_d_max && self.p_d_max <= 0.0) {
            return Err(MarketError::Domain(format!(
                "discharging price bounds must satisfy p_d_min <= p_d_max <= 0, got [{}, {}]",
                self.p_d_min, self.p_d_max
            )));
        }
        if self.e0 <= 0.0 {
            return Err(MarketError::Domain("e0 must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(MarketError::Domain("epsilon must be positive".into()));
        }
        if self.delta < 0.0 {
            return Err(MarketError::Domain("delta must be non-negative".into()));
        }
        if self.e_limit < 0.0 {
            return Err(MarketError::Domain("e_limit must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FollowerMode {
    Charge,
    Idle,
    Discharge,
}

/// One EV's best response at a given discharging price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerDecision {
    /// Normalized trade fraction in [-1, 1]; positive charges.
    pub x: f64,
    pub mode: FollowerMode,
    /// Utility achieved at `x`.
    pub utility: f64,
}

impl FollowerDecision {
    pub const IDLE_ZERO: FollowerDecision = FollowerDecision {
        x: 0.0,
        mode: FollowerMode::Idle,
        utility: 0.0,
    };
}

/// Aggregator revenue at one discharging price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueBreakdown {
    /// Service fees collected from charging EVs, CNY.
    pub r_service: f64,
    /// Auxiliary-market revenue for discharged energy, CNY.
    pub r_grid_v2g: f64,
    /// Cost of V2G service: idle fees plus discharge payouts, CNY.
    pub c_v2g: f64,
    /// Penalty for deviating from the auxiliary demand, CNY.
    pub c_limit: f64,
    /// r_service + r_grid_v2g - c_v2g - c_limit.
    pub total: f64,
}

impl RevenueBreakdown {
    pub const ZERO: RevenueBreakdown = RevenueBreakdown {
        r_service: 0.0,
        r_grid_v2g: 0.0,
        c_v2g: 0.0,
        c_limit: 0.0,
        total: 0.0,
    };
}

/// Optimal discharging price with its revenue breakdown and the
/// follower decisions it induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderSolution {
    pub p_d_star: f64,
    pub breakdown: RevenueBreakdown,
    pub decisions: Vec<(u64, FollowerDecision)>,
}

/// User satisfaction of trading fraction `x` at willingness `w`.
///
/// Continuous and strictly increasing on [-1, 1] with S(0) = 0,
/// S(1) = w, S(-1) = -w.
pub fn satisfaction(x: f64, w: f64) -> Result<f64, MarketError> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(MarketError::Domain(format!("x {x} outside [-1,1]")));
    }
    if w <= 0.0 {
        return Err(MarketError::Domain(format!("willingness {w} must be positive")));
    }
    Ok(satisfaction_unchecked(x, w))
}

#[inline]
fn satisfaction_unchecked(x: f64, w: f64) -> f64 {
    if x >= 0.0 {
        w * (1.0 + x).log2()
    } else {
        w * ((2.0 + x).log2() - 1.0)
    }
}

/// Willingness to charge, beta / soc, floored at [`SOC_FLOOR`].
pub fn willingness(beta: f64, soc: f64) -> Result<f64, MarketError> {
    if beta <= 0.0 {
        return Err(MarketError::Domain(format!("beta {beta} must be positive")));
    }
    if !(0.0..=1.0).contains(&soc) {
        return Err(MarketError::Domain(format!("soc {soc} outside [0,1]")));
    }
    Ok(beta / soc.max(SOC_FLOOR))
}

/// SOC-feasible range of `x`: any dispatch inside it keeps SOC in [0,1].
pub fn feasible_bounds(ev: &EvChargeState, e0: f64) -> (f64, f64) {
    let x_hi = ((1.0 - ev.soc) * ev.capacity / e0).min(1.0).max(0.0);
    let x_lo = (-(ev.soc * ev.capacity) / e0).max(-1.0).min(0.0);
    (x_lo, x_hi)
}

/// Follower utility at fraction `x` under discharging price `p_d`.
///
/// Charging pays p_c = p_real_time + w_service per unit; discharging
/// earns p_d per unit net of the linear degradation term a·x.
pub fn follower_utility(
    x: f64,
    params: &MarketParams,
    ev: &EvChargeState,
    p_d: f64,
) -> Result<f64, MarketError> {
    let (x_lo, x_hi) = feasible_bounds(ev, params.e0);
    if x < x_lo || x > x_hi {
        return Err(MarketError::Domain(format!(
            "x {x} outside feasible [{x_lo}, {x_hi}]"
        )));
    }
    let w = willingness(ev.beta, ev.soc)?;
    Ok(follower_utility_unchecked(x, w, params.p_c(), ev, p_d))
}

#[inline]
fn follower_utility_unchecked(x: f64, w: f64, p_c: f64, ev: &EvChargeState, p_d: f64) -> f64 {
    if x > 0.0 {
        satisfaction_unchecked(x, w) - p_c * x
    } else if x == 0.0 {
        ev.u_idle
    } else {
        // BDC = a·x is positive while discharging (a < 0, x < 0).
        satisfaction_unchecked(x, w) - ev.a * x + p_d * x
    }
}

/// Closed-form best response of one EV to the discharging price `p_d`.
///
/// Each branch of the utility is concave, so the interior stationary
/// point clamped to the feasible interval is the branch optimum. Ties
/// resolve Idle > Charge > Discharge.
pub fn follower_best_response(
    ev: &EvChargeState,
    params: &MarketParams,
    p_d: f64,
) -> FollowerDecision {
    let w = ev.beta / ev.soc.max(SOC_FLOOR);
    let p_c = params.p_c();
    let (x_lo, x_hi) = feasible_bounds(ev, params.e0);

    let mut best = FollowerDecision {
        x: 0.0,
        mode: FollowerMode::Idle,
        utility: ev.u_idle,
    };

    // Charge branch: d/dx [w·log2(1+x) - p_c·x] = 0 at x = w/(p_c ln2) - 1.
    if x_hi > 0.0 {
        let x_c = if p_c > 0.0 {
            (w / (p_c * LN_2) - 1.0).clamp(0.0, x_hi)
        } else {
            x_hi
        };
        if x_c > 0.0 {
            let u = follower_utility_unchecked(x_c, w, p_c, ev, p_d);
            if u > best.utility {
                best = FollowerDecision {
                    x: x_c,
                    mode: FollowerMode::Charge,
                    utility: u,
                };
            }
        }
    }

    // Discharge branch: stationary at x = w/((a - p_d) ln2) - 2 when
    // a - p_d > 0; otherwise the branch supremum is 0 at x -> 0⁻ and
    // never beats Idle under the tie rule.
    if x_lo < 0.0 && ev.a - p_d > 0.0 {
        let x_d = (w / ((ev.a - p_d) * LN_2) - 2.0).clamp(x_lo, 0.0);
        if x_d < 0.0 {
            let u = follower_utility_unchecked(x_d, w, p_c, ev, p_d);
            if u > best.utility {
                best = FollowerDecision {
                    x: x_d,
                    mode: FollowerMode::Discharge,
                    utility: u,
                };
            }
        }
    }

    best
}

/// Aggregator revenue at discharging price `p_d`, with the follower
/// decisions that produce it. Sums run in ascending `ev_id` order.
pub fn eva_revenue_with_decisions(
    fleet: &[EvChargeState],
    params: &MarketParams,
    p_d: f64,
) -> (RevenueBreakdown, Vec<(u64, FollowerDecision)>) {
    let mut order: Vec<usize> = (0..fleet.len()).collect();
    order.sort_by_key(|&i| fleet[i].ev_id);

    let mut decisions = Vec::with_capacity(fleet.len());
    let mut r_service = 0.0;
    let mut c_idle = 0.0;
    let mut c_discharge = 0.0;
    let mut delivered = 0.0;
    for &i in &order {
        let ev = &fleet[i];
        let d = follower_best_response(ev, params, p_d);
        match d.mode {
            FollowerMode::Charge => r_service += params.w_service * params.e0 * d.x,
            FollowerMode::Idle => c_idle += params.p_delay.abs(),
            FollowerMode::Discharge => {
                c_discharge += p_d * params.e0 * d.x;
                delivered += params.e0 * d.x.abs();
            }
        }
        decisions.push((ev.ev_id, d));
    }
    let r_grid_v2g = params.w_grid * delivered;
    let c_v2g = c_idle + c_discharge;
    let c_limit = (params.e_limit - delivered).abs() * params.delta;
    let breakdown = RevenueBreakdown {
        r_service,
        r_grid_v2g,
        c_v2g,
        c_limit,
        total: r_service + r_grid_v2g - c_v2g - c_limit,
    };
    (breakdown, decisions)
}

/// Aggregator revenue at discharging price `p_d`.
pub fn eva_revenue(fleet: &[EvChargeState], params: &MarketParams, p_d: f64) -> RevenueBreakdown {
    let mut order: Vec<usize> = (0..fleet.len()).collect();
    order.sort_by_key(|&i| fleet[i].ev_id);

    let mut r_service = 0.0;
    let mut c_idle = 0.0;
    let mut c_discharge = 0.0;
    let mut delivered = 0.0;
    for &i in &order {
        let ev = &fleet[i];
        let d = follower_best_response(ev, params, p_d);
        match d.mode {
            FollowerMode::Charge => r_service += params.w_service * params.e0 * d.x,
            FollowerMode::Idle => c_idle += params.p_delay.abs(),
            FollowerMode::Discharge => {
                c_discharge += p_d * params.e0 * d.x;
                delivered += params.e0 * d.x.abs();
            }
        }
    }
    let r_grid_v2g = params.w_grid * delivered;
    let c_v2g = c_idle + c_discharge;
    let c_limit = (params.e_limit - delivered).abs() * params.delta;
    RevenueBreakdown {
        r_service,
        r_grid_v2g,
        c_v2g,
        c_limit,
        total: r_service + r_grid_v2g - c_v2g - c_limit,
    }
}

/// Candidate discharging prices: p_d_min + k·epsilon, with p_d_max
/// always included as the last point.
pub fn price_grid(p_d_min: f64, p_d_max: f64, epsilon: f64) -> Result<Vec<f64>, MarketError> {
    if p_d_min > p_d_max {
        return Err(MarketError::Domain(format!(
            "inverted price bounds [{p_d_min}, {p_d_max}]"
        )));
    }
    if epsilon <= 0.0 {
        return Err(MarketError::Domain("epsilon must be positive".into()));
    }
    let span = p_d_max - p_d_min;
    let n = (span / epsilon + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| p_d_min + k as f64 * epsilon).collect();
    if span - n as f64 * epsilon > epsilon * 1e-9 {
        grid.push(p_d_max);
    } else {
        *grid.last_mut().expect("grid is non-empty") = p_d_max;
    }
    Ok(grid)
}

/// Split `[0, grid_size)` into contiguous ranges with lengths
/// proportional to `capacities`, using largest-remainder rounding.
pub fn partition_grid(
    grid_size: usize,
    capacities: &[f64],
) -> Result<Vec<Range<usize>>, MarketError> {
    if grid_size == 0 {
        return Err(MarketError::Domain("grid_size must be >= 1".into()));
    }
    let total: f64 = capacities.iter().filter(|c| **c > 0.0).sum();
    if total <= 0.0 {
        return Err(MarketError::Domain("all capacities are zero".into()));
    }
    let quotas: Vec<f64> = capacities
        .iter()
        .map(|&c| if c > 0.0 { grid_size as f64 * c / total } else { 0.0 })
        .collect();
    let mut lengths: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = lengths.iter().sum();
    // Hand out the leftover points by descending fractional part,
    // ties by lowest index.
    let mut by_frac: Vec<usize> = (0..quotas.len()).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).expect("finite quotas").then(a.cmp(&b))
    });
    for &i in by_frac.iter().take(grid_size - assigned) {
        lengths[i] += 1;
    }
    let mut ranges = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for len in lengths {
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, grid_size);
    Ok(ranges)
}

/// Maximum revenue found over one subrange of the price grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub best_total: f64,
    pub best_price: f64,
}

/// Exhaustive revenue search over `grid[range]` (the whole grid when
/// `range` is `None`). Ties resolve to the smallest price.
pub fn leader_grid_search(
    fleet: &[EvChargeState],
    params: &MarketParams,
    grid: &[f64],
    range: Option<Range<usize>>,
) -> Option<SearchResult> {
    let range = range.unwrap_or(0..grid.len());
    let mut best: Option<SearchResult> = None;
    for &p_d in &grid[range] {
        let total = eva_revenue(fleet, params, p_d).total;
        let better = match best {
            None => true,
            // Ascending grid order, so strict improvement alone
            // implements the smallest-price tie rule.
            Some(b) => total > b.best_total,
        };
        if better {
            best = Some(SearchResult {
                best_total: total,
                best_price: p_d,
            });
        }
    }
    best
}

/// Deterministic reduce over per-subrange results: maximum total, ties
/// to the smallest price. Inputs must be ordered by subrange index.
pub fn reduce_search_results<I: IntoIterator<Item = SearchResult>>(
    results: I,
) -> Option<SearchResult> {
    let mut best: Option<SearchResult> = None;
    for r in results {
        let better = match best {
            None => true,
            Some(b) => {
                r.best_total > b.best_total
                    || (r.best_total == b.best_total && r.best_price < b.best_price)
            }
        };
        if better {
            best = Some(r);
        }
    }
    best
}

/// Full leader solve: search the whole price grid, then re-evaluate
/// the winning price to attach the revenue breakdown and decisions.
pub fn leader_solve(
    fleet: &[EvChargeState],
    params: &MarketParams,
) -> Result<LeaderSolution, MarketError> {
    params.validate()?;
    let grid = price_grid(params.p_d_min, params.p_d_max, params.epsilon)?;
    let best = leader_grid_search(fleet, params, &grid, None).expect("grid is non-empty");
    Ok(solution_at(fleet, params, best.best_price))
}

/// Assemble a [`LeaderSolution`] at a known price.
pub fn solution_at(fleet: &[EvChargeState], params: &MarketParams, p_d: f64) -> LeaderSolution {
    let (breakdown, decisions) = eva_revenue_with_decisions(fleet, params, p_d);
    LeaderSolution {
        p_d_star: p_d,
        breakdown,
        decisions,
    }
}
