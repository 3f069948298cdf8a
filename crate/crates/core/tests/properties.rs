use proptest::prelude::*;
use scs_patrol::metrics::{idle_stats, isolation_stats, IdleSummary, IsolationSummary};
use scs_patrol::motion::{self, MixingNorm};
use scs_patrol::sim::{self, EventLog};
use scs_patrol::topology::build_schedule;
use scs_patrol::{GridSpec, SimConfig, Strategy, Topology};

fn square(n: usize) -> Topology {
    Topology::new(GridSpec::square(n).unwrap())
}

#[test]
fn reversed_schedule_gives_the_transposed_chain() {
    for n in [2, 3, 4] {
        let grid = GridSpec::square(n).unwrap();
        let forward = motion::build_motion_graph(&Topology::new(grid)).unwrap().1;
        let reversed = Topology::with_schedule(grid, build_schedule(&grid).reversed());
        let backward = motion::build_motion_graph(&reversed).unwrap().1;
        assert_eq!(
            backward.to_dense(),
            forward.transpose().to_dense(),
            "{n}x{n}"
        );
    }
}

#[test]
fn frobenius_distance_dominates_spectral() {
    let m = motion::build_motion_graph(&square(6)).unwrap().1;
    let s = motion::distance_profile(&m, 30, MixingNorm::Spectral);
    let f = motion::distance_profile(&m, 30, MixingNorm::Frobenius);
    for (a, b) in s.iter().zip(&f) {
        assert!(*a <= b * (1.0 + 1e-9));
    }
    assert!(s.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)));
}

#[test]
fn mixing_time_grows_about_a_sixth_per_circle() {
    let points: Vec<(f64, f64)> = [5, 10, 15, 20]
        .into_iter()
        .map(|n| {
            let m = motion::build_motion_graph(&square(n)).unwrap().1;
            let t = motion::mixing_time_with(&m, 0.25, 1_000, MixingNorm::Frobenius).unwrap();
            ((n * n) as f64, t as f64)
        })
        .collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    assert!((slope - 0.17).abs() <= 0.03, "slope {slope}");
}

#[test]
fn full_team_broadcasts_within_two_rings() {
    for n in [3, 5] {
        let grid = GridSpec::square(n).unwrap();
        let topo = Topology::new(grid);
        for strategy in [
            Strategy::deterministic(),
            Strategy::random(),
            Strategy::quasi_random(),
        ] {
            let cfg = SimConfig::new(grid, n * n, strategy);
            for seed in 0..20 {
                let out = sim::run_broadcast(&topo, &cfg, &mut sim::rng_from_seed(seed)).unwrap();
                assert!(
                    out.completed && out.time <= 2.0 * n as f64,
                    "{n}x{n} {:?} {}",
                    strategy.kind(),
                    out.time
                );
            }
        }
    }
}

/// Cover time of a lone walker on 100 circles is around `n ln n`, just past
/// the default 400-unit horizon, so full coverage is checked over ten
/// horizons and the default horizon only has to reach most circles.
#[test]
fn lone_random_robot_visits_every_circle() {
    let grid = GridSpec::square(10).unwrap();
    let topo = Topology::new(grid);
    let horizon = grid.default_duration();
    for seed in 0..10 {
        let cfg = SimConfig::new(grid, 1, Strategy::random())
            .with_seed(seed)
            .with_duration(10 * horizon);
        let mut first = vec![None; grid.circles()];
        sim::run_streaming(&topo, &cfg, |state, _| {
            first[state.assignment[0].0].get_or_insert(state.tick);
        })
        .unwrap();
        assert!(first.iter().all(Option::is_some), "seed {seed}");
        let early = first
            .iter()
            .flatten()
            .filter(|&&t| t <= horizon * 4)
            .count();
        assert!(
            early >= 90,
            "seed {seed}: {early} circles by the default horizon"
        );
    }
}

#[test]
fn streamed_and_logged_runs_agree() {
    let grid = GridSpec::square(4).unwrap();
    let topo = Topology::new(grid);
    let cfg = SimConfig::new(grid, 5, Strategy::quasi_random()).with_seed(9);
    let mut ticks = 0;
    let logged = sim::run_observed(&topo, &cfg, |_, _| ticks += 1).unwrap();
    assert_eq!(ticks, cfg.ticks());
    assert_eq!(logged, sim::run_on(&topo, &cfg).unwrap());
    assert_eq!(logged.final_tick, cfg.ticks());
}

fn logs(seeds: &[u64]) -> Vec<EventLog> {
    let grid = GridSpec::square(4).unwrap();
    let topo = Topology::new(grid);
    seeds
        .iter()
        .map(|&s| {
            sim::run_on(
                &topo,
                &SimConfig::new(grid, 3, Strategy::random()).with_seed(s),
            )
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn aggregation_ignores_log_order(seeds in proptest::collection::vec(0u64..1_000, 1..5), rot in 0usize..5) {
        let a = logs(&seeds);
        let mut b = a.clone();
        let r = rot % b.len();
        b.rotate_left(r);
        let (ia, ib): (IdleSummary, IdleSummary) = (idle_stats(&a, 64, 64).unwrap(), idle_stats(&b, 64, 64).unwrap());
        prop_assert!((ia.avg_idle - ib.avg_idle).abs() <= 1e-12 * ia.avg_idle.max(1.0));
        prop_assert!((ia.max_idle - ib.max_idle).abs() <= 1e-12 * ia.max_idle.max(1.0));
        let (sa, sb): (IsolationSummary, IsolationSummary) =
            (isolation_stats(&a, 3, 64).unwrap(), isolation_stats(&b, 3, 64).unwrap());
        prop_assert!((sa.avg_isolation - sb.avg_isolation).abs() <= 1e-12 * sa.avg_isolation.max(1.0));
    }

    #[test]
    fn random_transition_rows_sum_to_one(n in 1usize..8, m in 1usize..8) {
        let topo = Topology::new(GridSpec::new(n, m).unwrap());
        let (_, chain) = motion::build_motion_graph(&topo).unwrap();
        let report = motion::stationary_check(&chain);
        prop_assert!(report.passed(), "{n}x{m}: {report:?}");
    }
}
