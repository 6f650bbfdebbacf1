use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};

use v2g_core::simulator::{
    run_horizon, AuxSource, FleetSource, GameConstants, ScenarioConfig, ScpConfig, TariffSource,
};

fn scenario(n: usize, horizon: u64) -> ScenarioConfig {
    ScenarioConfig {
        start_slot: 0,
        horizon_slots: horizon,
        fleet: FleetSource::Synthetic {
            n,
            seed: 1,
            no_jitter: false,
        },
        tariff: TariffSource::Shenzhen,
        aux_demand: AuxSource::Synthetic {
            peak_kwh: 40.0,
            seed: 1,
        },
        constants: GameConstants::default(),
        scp: ScpConfig::default(),
        seed: 1,
    }
}

fn bench_horizon(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_horizon");
    group.sample_size(10);
    group.bench_function("50_evs_24_slots", |b| {
        let config = scenario(50, 24);
        b.iter(|| run_horizon(&config, Path::new(".")).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_horizon);
criterion_main!(benches);
