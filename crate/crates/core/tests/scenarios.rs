use proptest::prelude::*;
use wpo_core::grid::load_ieee33;
use wpo_core::numerics::Rng;
use wpo_core::scenarios::{
    daily_shape, denormalize, generate_scenarios, normalize, Case, GeneratorConfig, NormStats,
    ScenarioDataset,
};

fn small(days: usize) -> GeneratorConfig {
    GeneratorConfig {
        days,
        ..GeneratorConfig::default()
    }
}

fn gen(cfg: &GeneratorConfig, seed: u64) -> ScenarioDataset {
    generate_scenarios(&load_ieee33(), cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn zero_noise_is_pure_shape() {
    let cfg = GeneratorConfig {
        sigma: 0.0,
        weekend_factor: 1.0,
        ..small(4)
    };
    let ds = gen(&cfg, 1);
    let n = ds.n_nodes();
    let spd = cfg.steps_per_day;
    for t in 0..ds.len() {
        for i in 0..n {
            assert_eq!(ds.values[t][i], cfg.base * daily_shape(&cfg, i, n, t));
            if t >= spd {
                assert_eq!(ds.values[t][i], ds.values[t - spd][i]);
            }
        }
    }
}

#[test]
fn same_seed_is_bitwise_identical() {
    let cfg = small(3);
    let (a, b) = (gen(&cfg, 9), gen(&cfg, 9));
    assert_eq!(a, b);
    assert_ne!(a.values, gen(&cfg, 10).values);
}

#[test]
fn residual_autocorrelation_matches_ar1() {
    let cfg = GeneratorConfig {
        rho: 0.8,
        sigma: 0.1,
        ..small(105)
    };
    let ds = gen(&cfg, 4);
    let n = ds.n_nodes();
    let steps = 10_000;
    for i in 0..n {
        let r: Vec<f64> = (0..steps)
            .map(|t| ds.values[t][i] / (cfg.base * daily_shape(&cfg, i, n, t)) - 1.0)
            .collect();
        let mean = r.iter().sum::<f64>() / steps as f64;
        let var: f64 = r.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = r.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum();
        let ac = cov / var;
        assert!(
            (0.7..=0.9).contains(&ac),
            "node {}: lag-1 autocorrelation {ac}",
            ds.node_ids[i]
        );
    }
}

#[test]
fn case2_scales_branches() {
    let net = load_ieee33();
    let m = Case::Case2.multipliers(&net).unwrap();
    for (id, k) in net.ul_nodes.iter().zip(&m) {
        let want = match id {
            8 | 12 | 14 | 16 | 18 => 0.5,
            29 | 30 | 31 | 33 => 1.6,
            _ => 1.0,
        };
        assert_eq!(*k, want, "node {id}");
    }
    assert!(Case::Custom(vec![1.0; 3]).multipliers(&net).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let net = load_ieee33();
    for cfg in [
        small(1),
        GeneratorConfig { lag: 0, ..small(3) },
        GeneratorConfig {
            rho: 1.0,
            ..small(3)
        },
        GeneratorConfig {
            sigma: -0.1,
            ..small(3)
        },
        GeneratorConfig {
            train_fraction: 1.0,
            ..small(3)
        },
    ] {
        assert!(
            generate_scenarios(&net, &cfg, &mut Rng::new(0)).is_err(),
            "{cfg:?}"
        );
    }
}

#[test]
fn supervised_window_arithmetic() {
    let ds = gen(&GeneratorConfig { lag: 4, ..small(3) }, 2);
    let b = ds.make_supervised(20..30).unwrap();
    assert_eq!(b.len(), 10);
    assert_eq!(b.features.shape(), &[10, 12, 4]);
    assert_eq!(b.targets.shape(), &[10, 12]);
    assert_eq!(b.steps, (20..30).collect::<Vec<_>>());
    // window for target t is [t-4, t)
    let want = normalize(ds.values[17][3], ds.norm[3]);
    assert_eq!(b.features.data()[3 * 4 + 1], want);
    assert!(ds.make_supervised(2..10).is_err());
    assert!(ds.make_supervised(10..ds.len() + 1).is_err());
}

#[test]
fn constant_trace_normalizes_to_zero() {
    // a dyadic base keeps the mean exact
    let cfg = GeneratorConfig {
        sigma: 0.0,
        daily_amplitude: 0.0,
        weekend_factor: 1.0,
        base: 0.0625,
        ..small(3)
    };
    let ds = gen(&cfg, 0);
    assert!(ds.norm.iter().all(|s| s.std == 1e-6));
    let b = ds.make_supervised(ds.train.clone()).unwrap();
    assert!(b.features.data().iter().all(|z| *z == 0.0));
}

#[test]
fn targets_round_trip_to_raw_values() {
    let ds = gen(&small(3), 5);
    let b = ds.make_supervised(ds.eval.clone()).unwrap();
    let truth = ds.truths(&b.steps);
    for (r, t) in truth.iter().enumerate() {
        let back = ds.denormalize_row(b.targets.row(r));
        for (x, y) in back.iter().zip(t) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn normalize_examples() {
    let s = NormStats {
        mean: 0.3,
        std: 0.05,
    };
    assert_eq!(normalize(0.3, s), 0.0);
    assert!((normalize(0.35, s) - 1.0).abs() <= 1e-12);
}

#[test]
fn future_values_do_not_reach_feature_windows() {
    let ds = gen(&small(3), 8);
    let t = 100;
    let before = ds.make_supervised(t..t + 1).unwrap();
    let mut shuffled = ds.clone();
    Rng::new(1).shuffle(&mut shuffled.values[t..]);
    let after = shuffled.make_supervised(t..t + 1).unwrap();
    assert_eq!(before.features, after.features);
}

#[test]
fn splits_are_disjoint() {
    let ds = gen(&small(5), 3);
    assert!(ds.train.end <= ds.eval.start);
    assert_eq!(ds.train.start, ds.lag);
    assert_eq!(ds.eval.end, ds.len());
    let tr = ds.make_supervised(ds.train.clone()).unwrap();
    let ev = ds.make_supervised(ds.eval.clone()).unwrap();
    assert!(tr.steps.iter().all(|s| !ev.steps.contains(s)));
}

#[test]
fn loads_stay_bounded_over_long_runs() {
    let cfg = GeneratorConfig {
        days: 1042,
        ..GeneratorConfig::default()
    };
    let ds = gen(&cfg, 21);
    assert!(ds.len() >= 100_000);
    let mult = cfg.case.multipliers(&load_ieee33()).unwrap();
    for row in &ds.values {
        for (v, m) in row.iter().zip(&mult) {
            assert!(*v >= 0.0 && *v <= 3.0 * cfg.base * m, "{v}");
        }
    }
}

#[test]
fn csv_round_trip() {
    let ds = gen(&small(2), 6);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), "data").unwrap();
    let back = ScenarioDataset::load(dir.path(), "data").unwrap();
    assert_eq!(back.node_ids, ds.node_ids);
    assert_eq!(
        (back.train.clone(), back.eval.clone(), back.lag),
        (ds.train.clone(), ds.eval.clone(), ds.lag)
    );
    for (a, b) in back.values.iter().flatten().zip(ds.values.iter().flatten()) {
        assert!((a - b).abs() <= 1e-11 * b.abs());
    }
}

proptest! {
    #[test]
    fn normalize_round_trip(v in prop::collection::vec(-10.0f64..10.0, 1..50), mean in -5.0f64..5.0, std in 1e-6f64..10.0) {
        let s = NormStats { mean, std };
        for x in v {
            prop_assert!((denormalize(normalize(x, s), s) - x).abs() <= 1e-12 * (1.0 + x.abs() + mean.abs()));
        }
    }

    #[test]
    fn generated_loads_are_nonnegative(seed in any::<u64>(), sigma in 0.0f64..0.6) {
        let ds = gen(&GeneratorConfig { sigma, ..small(2) }, seed);
        prop_assert!(ds.values.iter().flatten().all(|v| *v >= 0.0 && v.is_finite()));
    }
}
