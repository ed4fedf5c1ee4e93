use std::collections::BTreeMap;

use proptest::prelude::*;

use pbkd::config::{DatasetSource, RunConfig};
use pbkd::data::derive_seed;
use pbkd::distill::weights_io::{decode, encode};
use pbkd::distill::LossMode;
use pbkd::metrics::{cpu_avg_power, energy_integrate, greenup, powerup, speedup_efficiency, synthetic_power_model};
use pbkd::replacement::CandidateKind;
use pbkd::runtime::{simulate_execution, simulate_work_stealing, StealTiming, Trace};
use pbkd::scheduler::{self, brute_force_schedule, lpt_bound, makespan, round_robin, weights_from, wfd_bin_pack, Policy};
use pbkd::tensor::ops::mse_local_loss;
use pbkd::tensor::{Shape, Tensor};

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..100.0, 1..12)
}

fn policy() -> impl Strategy<Value = Policy> {
    prop_oneof![Just(Policy::RoundRobin), Just(Policy::Wfd), Just(Policy::WorkStealing)]
}

/// Each task id appears in exactly one span.
fn each_task_once(trace: &Trace, n: usize) -> bool {
    let mut seen = vec![0; n];
    for s in trace.spans().unwrap() {
        seen[s.task_id] += 1;
    }
    seen.iter().all(|&c| c == 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wfd_assigns_every_task_once_within_bounds(w in weights(), workers in 1usize..6) {
        let tw = weights_from(&w);
        let plan = wfd_bin_pack(&tw, workers).unwrap();
        let mut ids: Vec<usize> = plan.assignments.iter().flatten().copied().collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..w.len()).collect::<Vec<_>>());
        let m = makespan(&plan, &tw).unwrap();
        let total: f64 = w.iter().sum();
        let biggest = w.iter().cloned().fold(0.0, f64::max);
        prop_assert!(m + 1e-9 >= biggest && m + 1e-9 >= total / workers as f64);
        prop_assert!(m <= total + 1e-9);
        prop_assert_eq!(plan.predicted_makespan, Some(m));
    }

    #[test]
    fn wfd_is_within_the_lpt_bound(w in prop::collection::vec(1u32..50, 1..9), workers in 1usize..5) {
        let w: Vec<f64> = w.into_iter().map(f64::from).collect();
        let m = makespan(&wfd_bin_pack(&weights_from(&w), workers).unwrap(), &weights_from(&w)).unwrap();
        let best = brute_force_schedule(&w, workers).unwrap();
        prop_assert!(best <= m + 1e-9);
        prop_assert!(m <= lpt_bound(workers) * best + 1e-9);
    }

    #[test]
    fn round_robin_balances_counts(n in 0usize..40, workers in 1usize..8) {
        let ids: Vec<usize> = (0..n).collect();
        let plan = round_robin(&ids, workers).unwrap();
        let lens: Vec<usize> = plan.assignments.iter().map(Vec::len).collect();
        let (lo, hi) = (*lens.iter().min().unwrap(), *lens.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(lens.iter().sum::<usize>(), n);
    }

    #[test]
    fn work_stealing_runs_each_task_once_and_never_loses_to_serial(
        w in weights(),
        owners in prop::collection::vec(0usize..4, 12),
        workers in 1usize..5,
        max_delay in 0.0f64..20.0,
        seed in any::<u64>(),
    ) {
        let mut initial = vec![Vec::new(); workers];
        for (t, o) in owners.iter().take(w.len()).enumerate() {
            initial[o % workers].push(t);
        }
        let sim = simulate_work_stealing(&initial, &weights_from(&w), StealTiming { max_delay, seed }).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!(each_task_once(&sim.trace, w.len()));
        prop_assert!(sim.wall_time <= total + 1e-9);
        prop_assert!(sim.wall_time + 1e-9 >= total / workers as f64);
        sim.trace.check_two_sync().unwrap();
    }

    #[test]
    fn simulated_policies_cover_all_tasks(w in weights(), workers in 1usize..5, p in policy()) {
        let sim = simulate_execution(p, &weights_from(&w), workers, StealTiming::instant()).unwrap();
        prop_assert!(each_task_once(&sim.trace, w.len()));
        let csv = sim.trace.to_csv().unwrap();
        prop_assert_eq!(Trace::parse_csv(&csv).unwrap(), sim.trace);
    }

    #[test]
    fn metric_identities(ts in 1.0f64..1e5, tp in 1.0f64..1e5, es in 1.0f64..1e7, ep in 1.0f64..1e7, workers in 1usize..64) {
        let (s, e) = speedup_efficiency(ts, tp, workers).unwrap();
        prop_assert!((e * workers as f64 - s).abs() <= 1e-12 * s);
        let g = greenup(es, ep).unwrap();
        prop_assert!((g * ep - es).abs() <= 1e-9 * es);
        let p = powerup(s, g).unwrap();
        prop_assert!((p * g - s).abs() <= 1e-12 * s);
    }

    #[test]
    fn zero_idle_power_makes_greenup_one(w in weights(), workers in 1usize..5, p in policy(), active in 1.0f64..300.0) {
        let tw = weights_from(&w);
        let serial = simulate_execution(Policy::RoundRobin, &tw, 1, StealTiming::instant()).unwrap();
        let par = simulate_execution(p, &tw, workers, StealTiming::instant()).unwrap();
        let e = |t: &Trace| energy_integrate(&synthetic_power_model(t, 0.0, active).unwrap()).unwrap();
        let g = greenup(e(&serial.trace), e(&par.trace)).unwrap();
        prop_assert!((g - 1.0).abs() < 1e-9, "greenup {}", g);
    }

    #[test]
    fn power_recovers_the_generating_series(watts in prop::collection::vec(0u32..500, 1..30), freq in prop::sample::select(vec![1.0, 2.0, 4.0, 8.0])) {
        let mut energy = vec![0.0];
        for &p in &watts {
            energy.push(energy.last().unwrap() + f64::from(p) / freq);
        }
        let back = cpu_avg_power(&energy, freq).unwrap();
        let want: Vec<f64> = watts.iter().map(|&p| f64::from(p)).collect();
        prop_assert_eq!(back, want);
    }

    #[test]
    fn mse_is_nonnegative_and_zero_only_on_equal(a in prop::collection::vec(-5.0f64..5.0, 1..40), shift in -1.0f64..1.0) {
        let shape = Shape::new(1, 1, 1, a.len());
        let x = Tensor::<f64>::from_vec(shape, a.clone()).unwrap();
        let y = Tensor::<f64>::from_vec(shape, a.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert_eq!(mse_local_loss(&x, &x).unwrap().0, 0.0);
        let (l, _) = mse_local_loss(&x, &y).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - shift * shift).abs() < 1e-9);
    }

    #[test]
    fn weights_encoding_round_trips(arrays in prop::collection::vec((1usize..3, 1usize..4, 1usize..3, 1usize..3, any::<u64>()), 0..5)) {
        let tensors: Vec<(String, Tensor)> = arrays
            .iter()
            .enumerate()
            .map(|(i, &(n, c, h, w, seed))| {
                let shape = Shape::new(n, c, h, w);
                let data = (0..shape.len()).map(|j| (derive_seed(seed, j as u64) % 1000) as f32 / 7.0 - 50.0).collect();
                (format!("a{i}.w"), Tensor::from_vec(shape, data).unwrap())
            })
            .collect();
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode(&refs).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            prop_assert_eq!(ta.data(), tb.data());
        }
        prop_assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        workers in 1usize..64,
        threshold in prop::option::of(0.0f64..2.0),
        lambda in 0.0f64..10.0,
        lr in 1e-6f64..1.0,
        samples in 1usize..100_000,
        p in policy(),
        cand in prop::sample::select(CandidateKind::ALL.to_vec()),
        combined in any::<bool>(),
        freeze in any::<bool>(),
    ) {
        let cfg = RunConfig {
            global_seed: seed,
            workers,
            policy: p,
            threshold,
            lambda_local: lambda,
            block_lr: lr,
            candidate: cand,
            loss_mode: if combined { LossMode::Combined } else { LossMode::LocalOnly },
            freeze_non_replaced: freeze,
            dataset: DatasetSource::Synthetic { samples },
            ..RunConfig::default()
        };
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn profile_files_round_trip(w in weights()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let tw = weights_from(&w);
        scheduler::write_profile(&path, &tw).unwrap();
        prop_assert_eq!(scheduler::read_profile(&path).unwrap(), tw);
    }
}

#[test]
fn seeds_are_distinct_per_stream() {
    let mut seen = BTreeMap::new();
    for s in 0..200u64 {
        let d = derive_seed(7, s);
        assert!(seen.insert(d, s).is_none());
        assert_eq!(d, derive_seed(7, s));
    }
}
