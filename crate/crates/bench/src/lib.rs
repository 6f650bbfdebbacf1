//! Shared fixtures for the benchmarks.

use v2g_core::market::{EvChargeState, MarketParams};

pub fn params(e_limit: f64) -> MarketParams {
    let p_real_time = 1.0;
    MarketParams {
        p_real_time,
        w_service: 0.5,
        w_grid: 0.792,
        p_delay: -0.1,
        p_d_min: -3.0 * p_real_time,
        p_d_max: 0.0,
        e0: 3.75,
        delta: 2.0 * p_real_time,
        epsilon: 0.01,
        e_limit,
    }
}

pub fn fleet(n: usize) -> Vec<EvChargeState> {
    (0..n)
        .map(|i| EvChargeState {
            ev_id: i as u64 + 1,
            capacity: 40.0 + (i % 5) as f64 * 30.0,
            soc: 0.1 + 0.8 * (i % 9) as f64 / 9.0,
            beta: 0.16,
            a: -0.01,
            u_idle: 0.0,
        })
        .collect()
}
