use proptest::prelude::*;
use wpo_core::dispatch::{
    check_socp_tightness, cost_of, decision_loss, pdpl, power_flow, realized_cost, solve_dispatch,
    DispatchStatus, Evaluator, OracleCache,
};
use wpo_core::grid::{load_ieee33, Branch, Bus, Costs, DgUnit, Network, DT_HOURS};
use wpo_core::numerics::Rng;

const R: f64 = 0.01;
const X: f64 = 0.01;

fn two_bus() -> Network {
    Network {
        buses: vec![
            Bus {
                id: 1,
                p_load: 0.0,
                q_load: 0.0,
            },
            Bus {
                id: 2,
                p_load: 0.0,
                q_load: 0.0,
            },
        ],
        branches: vec![Branch {
            from: 1,
            to: 2,
            r: R,
            x: X,
            i_max: 10.0,
        }],
        ul_nodes: vec![2],
        dg_nodes: vec![DgUnit { id: 2, p_max: 1.0 }],
        v_min: 0.90,
        v_max: 1.10,
        substation: 1,
        costs: Costs {
            pi_t: 20.0,
            pi_g: 10.0,
            pi_p: 100.0,
        },
    }
}

/// Receiving-end voltage squared of a two-bus line by the closed-form quadratic.
fn two_bus_v2_sq(p: f64, q: f64) -> Option<f64> {
    let b = 2.0 * (R * p + X * q) - 1.0;
    let c = (R * R + X * X) * (p * p + q * q);
    let disc = b * b - 4.0 * c;
    (disc >= 0.0).then(|| (-b + disc.sqrt()) / 2.0)
}

/// Brute-force dispatch on the two-bus line: DG on a 1e-3 grid.
fn two_bus_oracle(load: f64, costs: Costs) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=1000 {
        let pg = k as f64 * 1e-3;
        let p = load - pg;
        let Some(v2) = two_bus_v2_sq(p, 0.0) else {
            continue;
        };
        if v2 < 0.81 || v2 > 1.21 {
            continue;
        }
        let loss = R * p * p / v2;
        let import = p + loss;
        if import < -1e-12 {
            continue;
        }
        let cost = DT_HOURS * (costs.pi_t * import + costs.pi_g * pg);
        if cost < best.0 {
            best = (cost, pg);
        }
    }
    best
}

/// Complex fixed point `V2 = 1 - z conj(S / V2)` iterated by hand.
fn two_bus_fixed_point(p: f64, q: f64) -> f64 {
    let (mut vr, mut vi) = (1.0f64, 0.0f64);
    for _ in 0..500 {
        let m = vr * vr + vi * vi;
        let (ir, ii) = ((p * vr + q * vi) / m, (p * vi - q * vr) / m);
        vr = 1.0 - (R * ir - X * ii);
        vi = -(R * ii + X * ir);
    }
    vr.hypot(vi)
}

fn ul_scenarios(net: &Network, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            (0..net.n_ul())
                .map(|_| rng.uniform_in(0.0, 0.012))
                .collect()
        })
        .collect()
}

#[test]
fn zero_demand_dispatch_is_idle() {
    let net = load_ieee33().with_scaled_loads(0.0);
    let sol = solve_dispatch(&net, &[0.0; 12]).unwrap();
    assert_eq!(sol.status, DispatchStatus::Optimal);
    assert!(sol.p_dg.iter().all(|p| p.abs() <= 1e-6), "{:?}", sol.p_dg);
    assert!(sol.p_trade.abs() <= 1e-6 && sol.objective.abs() <= 1e-6);
    assert!(check_socp_tightness(&net, &sol).unwrap() <= 1e-6);
}

#[test]
fn two_bus_matches_brute_force() {
    let net = two_bus();
    let sol = solve_dispatch(&net, &[0.5]).unwrap();
    assert_eq!(sol.status, DispatchStatus::Optimal);
    let (best, pg) = two_bus_oracle(0.5, net.costs);
    assert!(
        (sol.objective - best).abs() <= 0.01 * best,
        "socp {} brute force {best}",
        sol.objective
    );
    assert!((sol.objective - 5.0 * DT_HOURS).abs() <= 0.01 * 5.0 * DT_HOURS);
    assert!((sol.p_dg[0] - pg).abs() <= 2e-3 && (sol.p_dg[0] - 0.5).abs() <= 5e-3);
    assert!(sol.p_trade.abs() <= 5e-3);
    // relaxation never beats a physical point by more than the grid resolution
    assert!(sol.objective <= best + 1e-3 * DT_HOURS * 20.0);
    assert!(check_socp_tightness(&net, &sol).unwrap() <= 1e-7);
}

#[test]
fn two_bus_relaxation_bounds_brute_force_when_importing() {
    // DG dearer than import: all power flows over the line
    let mut net = two_bus();
    net.costs = Costs {
        pi_t: 10.0,
        pi_g: 20.0,
        pi_p: 100.0,
    };
    let sol = solve_dispatch(&net, &[0.5]).unwrap();
    let (best, _) = two_bus_oracle(0.5, net.costs);
    assert!(sol.objective <= best + 1e-9);
    assert!((sol.objective - best).abs() <= 0.01 * best);
    assert!(check_socp_tightness(&net, &sol).unwrap() <= 1e-7);
}

#[test]
fn two_bus_power_flow_matches_fixed_point() {
    let net = two_bus();
    let pf = power_flow(&net, &[0.5], &[0.0]).unwrap();
    assert!(pf.converged);
    let want = two_bus_fixed_point(0.5, 0.0);
    assert!((pf.v[1] - want).abs() <= 1e-9, "{} vs {want}", pf.v[1]);
    assert!((pf.v[1] * pf.v[1] - two_bus_v2_sq(0.5, 0.0).unwrap()).abs() <= 1e-9);
}

#[test]
fn zero_load_power_flow_is_flat() {
    let net = load_ieee33().with_scaled_loads(0.0);
    let pf = power_flow(&net, &[0.0; 12], &[0.0; 6]).unwrap();
    assert!(pf.converged);
    assert!(pf.v.iter().all(|v| *v == 1.0));
    assert!(pf.flows.iter().all(|(p, q)| *p == 0.0 && *q == 0.0));
}

#[test]
fn ieee33_relaxation_is_tight_and_matches_sweep() {
    let net = load_ieee33();
    for ul in ul_scenarios(&net, 50, 4) {
        let sol = solve_dispatch(&net, &ul).unwrap();
        assert_eq!(sol.status, DispatchStatus::Optimal);
        let tight = check_socp_tightness(&net, &sol).unwrap();
        assert!(tight <= 1e-5, "tightness {tight}");
        let pf = power_flow(&net, &ul, &sol.p_dg).unwrap();
        for (v, vsq) in pf.v.iter().zip(&sol.v_sq) {
            assert!((v - vsq.sqrt()).abs() <= 1e-4);
        }
        let vsq_min = net.v_min * net.v_min - 1e-6;
        assert!(sol.v_sq.iter().all(|v| *v >= vsq_min));
        assert!(sol.p_dg.iter().all(|p| *p >= -1e-7 && *p <= 1.0 + 1e-7));
    }
}

#[test]
fn realized_cost_consistency() {
    let net = load_ieee33();
    let ul = vec![0.006; 12];
    let sol = solve_dispatch(&net, &ul).unwrap();
    let c = realized_cost(&net, &sol, &ul).unwrap();
    assert_eq!(c.c_pen, 0.0);
    assert!((c.total - sol.objective).abs() <= 1e-3 * sol.objective.abs());
    assert_eq!(c.total, c.c_op + c.c_pen);

    // a large surprise at the end of the main feeder drags voltages under v_min
    let mut truth = ul.clone();
    let j = net.ul_nodes.iter().position(|&id| id == 18).unwrap();
    let mut found = None;
    for k in 1..=30 {
        truth[j] = 0.01 * k as f64;
        if let Ok(c) = realized_cost(&net, &sol, &truth) {
            if c.c_pen > 0.0 {
                found = Some(truth[j]);
                break;
            }
        }
    }
    assert!(
        found.is_some(),
        "no converged under-prediction produced a voltage violation"
    );

    let mut free = net.clone();
    free.costs.pi_p = 0.0;
    let c = realized_cost(&free, &sol, &truth).unwrap();
    assert_eq!(c.total, c.c_op);
}

#[test]
fn decision_loss_axioms() {
    let net = load_ieee33();
    let ev = Evaluator::new(&net).unwrap();
    for ul in ul_scenarios(&net, 50, 5) {
        assert_eq!(ev.decision_loss(&ul, &ul).unwrap().loss, 0.0);
    }
    let mut rng = Rng::new(6);
    let truths = ul_scenarios(&net, 20, 7);
    for k in 0..100 {
        let t = &truths[k % truths.len()];
        let pred: Vec<f64> = t.iter().map(|v| v * rng.uniform_in(0.9, 1.1)).collect();
        let l = ev.decision_loss(&pred, t).unwrap().loss;
        assert!(l >= -1e-6, "decision loss {l}");
    }
    let t = &truths[0];
    let over: Vec<f64> = t.iter().map(|v| v * 1.2).collect();
    assert!(decision_loss(&net, &over, t).unwrap() > 0.0);
}

#[test]
fn oracle_predictor_has_zero_pdpl() {
    let net = load_ieee33();
    let ev = Evaluator::new(&net).unwrap();
    let truths = ul_scenarios(&net, 8, 8);
    let steps: Vec<usize> = (0..8).collect();
    let oracle = OracleCache::build(&ev, &truths).unwrap();
    let rep = pdpl(&ev, &truths, &truths, &steps, &oracle).unwrap();
    assert_eq!(rep.pdpl, 0.0);
    assert_eq!(rep.samples.len(), 8);
    assert!(pdpl(&ev, &[], &[], &[], &OracleCache { costs: vec![] }).is_err());
}

#[test]
fn power_flow_conserves_power() {
    let net = load_ieee33();
    let mut rng = Rng::new(9);
    for ul in ul_scenarios(&net, 30, 10) {
        let dg: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.0, 0.05)).collect();
        let pf = power_flow(&net, &ul, &dg).unwrap();
        assert!(pf.converged);
        let fixed: f64 = net.buses.iter().map(|b| b.p_load).sum();
        let losses: f64 = net
            .branches
            .iter()
            .enumerate()
            .map(|(k, br)| {
                let (p, q) = pf.flows[k];
                let vi = pf.v[net.bus_index(br.from).unwrap()];
                br.r * (p * p + q * q) / (vi * vi)
            })
            .sum();
        let balance = fixed + ul.iter().sum::<f64>() - dg.iter().sum::<f64>() + losses;
        assert!(
            (pf.p_slack - balance).abs() <= 1e-8,
            "{} vs {balance}",
            pf.p_slack
        );
        assert!((pf.losses - losses).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_is_monotone_in_price(scale in 1.0f64..20.0, extra in 0.0f64..0.5) {
        let net = load_ieee33();
        let mut truth = vec![0.006; 12];
        truth[4] += extra;
        let pf = power_flow(&net, &truth, &[0.0; 6]).unwrap();
        let base = cost_of(&net.costs, net.v_min, &[0.0; 6], &pf);
        let hi = Costs { pi_p: net.costs.pi_p * scale, ..net.costs };
        let up = cost_of(&hi, net.v_min, &[0.0; 6], &pf);
        prop_assert!(up.c_pen >= base.c_pen);
        prop_assert!(base.c_pen >= 0.0);
    }

    #[test]
    fn self_decision_loss_is_zero(seed in any::<u64>()) {
        let net = load_ieee33();
        let ul = ul_scenarios(&net, 1, seed).remove(0);
        prop_assert_eq!(decision_loss(&net, &ul, &ul).unwrap(), 0.0);
    }
}
