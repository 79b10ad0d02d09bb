use nalgebra::DMatrix;
use proptest::prelude::*;
use wpo_core::grid::{
    graph_spectrum, load_ieee33, spectrum_from_adjacency, validate_network, Branch, Network,
    Violation,
};
use wpo_core::numerics::{Rng, Tensor};

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.as_2d();
    DMatrix::from_fn(r, c, |i, j| t.get(i, j))
}

fn eigenvalues(t: &Tensor) -> Vec<f64> {
    let mut v: Vec<f64> = to_dmatrix(t)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn ieee33_shape() {
    let net = load_ieee33();
    assert_eq!(net.buses.len(), 33);
    assert_eq!(net.branches.len(), 32);
    assert_eq!(
        net.ul_nodes,
        vec![8, 12, 14, 16, 18, 22, 25, 27, 29, 30, 31, 33]
    );
    let dg: Vec<usize> = net.dg_nodes.iter().map(|d| d.id).collect();
    assert_eq!(dg, vec![7, 13, 17, 20, 29, 32]);
    assert!(net.dg_nodes.iter().all(|d| d.p_max == 1.0));
    assert_eq!((net.v_min, net.v_max), (0.90, 1.10));
    assert_eq!(net.costs.pi_p, 100.0);
    assert_eq!((net.costs.pi_g, net.costs.pi_t), (10.0, 20.0));
    assert_eq!(validate_network(&net), Ok(()));
}

#[test]
fn cycle_is_reported() {
    let mut net = load_ieee33();
    net.branches[31] = Branch {
        from: 33,
        to: 18,
        r: 0.01,
        x: 0.01,
        i_max: 1.0,
    };
    net.branches.push(Branch {
        from: 12,
        to: 22,
        r: 0.01,
        x: 0.01,
        i_max: 1.0,
    });
    let errs = validate_network(&net).unwrap_err();
    assert!(
        errs.iter().any(|v| v.to_string().starts_with("not a tree")),
        "{errs:?}"
    );
}

#[test]
fn cycle_with_correct_branch_count_is_reported() {
    // swap a leaf branch for a chord: still 32 branches, bus 33 isolated
    let mut net = load_ieee33();
    net.branches[31] = Branch {
        from: 18,
        to: 12,
        r: 0.01,
        x: 0.01,
        i_max: 1.0,
    };
    let errs = validate_network(&net).unwrap_err();
    assert!(errs.contains(&Violation::NotATree), "{errs:?}");
}

#[test]
fn zero_resistance_is_reported() {
    let mut net = load_ieee33();
    net.branches[4].r = 0.0;
    let errs = validate_network(&net).unwrap_err();
    let msgs: Vec<String> = errs.iter().map(|v| v.to_string()).collect();
    assert!(
        msgs.iter()
            .any(|m| m.contains("nonpositive impedance") && m.contains("5-6")),
        "{msgs:?}"
    );
}

#[test]
fn bad_bounds_and_unknown_nodes_are_reported() {
    let mut net = load_ieee33();
    net.v_min = 1.01;
    net.ul_nodes.push(99);
    let errs = validate_network(&net).unwrap_err();
    assert!(errs
        .iter()
        .any(|v| matches!(v, Violation::VoltageBounds { .. })));
    assert!(errs
        .iter()
        .any(|v| matches!(v, Violation::UnknownBus { id: 99, .. })));
}

#[test]
fn json_round_trip() {
    let net = load_ieee33();
    let back = Network::from_json_str(&net.to_json().unwrap()).unwrap();
    assert_eq!(back, net);
}

#[test]
fn two_node_laplacian() {
    let s = spectrum_from_adjacency(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
    assert_eq!(s.laplacian.data(), &[1.0, -1.0, -1.0, 1.0]);
    let ev = eigenvalues(&s.laplacian);
    assert!(ev[0].abs() <= 1e-12 && (ev[1] - 2.0).abs() <= 1e-12);
    assert!((s.lambda_max - 2.0).abs() <= 1e-12);
    let want = [0.0, -1.0, -1.0, 0.0];
    for (a, b) in s.scaled_laplacian.data().iter().zip(want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn isolated_node_is_an_error() {
    let w = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(spectrum_from_adjacency(w).is_err());
}

#[test]
fn ieee33_spectrum() {
    let net = load_ieee33();
    let s = graph_spectrum(&net).unwrap();
    let n = 33;
    for i in 0..n {
        for j in 0..n {
            assert_eq!(
                s.laplacian.get(i, j).to_bits(),
                s.laplacian.get(j, i).to_bits()
            );
        }
    }
    let ev = eigenvalues(&s.laplacian);
    assert!(ev[0].abs() <= 1e-10);
    assert!(ev[n - 1] <= 2.0 + 1e-10);
    assert!((s.lambda_max - ev[n - 1]).abs() <= 1e-9);
    let scaled = eigenvalues(&s.scaled_laplacian);
    assert!(scaled.iter().all(|x| x.abs() <= 1.0 + 1e-9), "{scaled:?}");

    // null vector is D^1/2 1
    let v: Vec<f64> = s.degree.iter().map(|d| d.sqrt()).collect();
    let lv = to_dmatrix(&s.laplacian) * DMatrix::from_column_slice(n, 1, &v);
    assert!(lv.amax() <= 1e-10 * v.iter().cloned().fold(0.0, f64::max));

    // weights are admittance magnitudes
    let br = &net.branches[7];
    let (a, b) = (
        net.bus_index(br.from).unwrap(),
        net.bus_index(br.to).unwrap(),
    );
    assert!(
        (s.adjacency.get(a, b) - 1.0 / br.r.hypot(br.x)).abs() <= 1e-12 * s.adjacency.get(a, b)
    );
}

#[test]
fn spectrum_is_deterministic() {
    let net = load_ieee33();
    assert_eq!(graph_spectrum(&net).unwrap(), graph_spectrum(&net).unwrap());
}

/// Number of simple paths between two buses by exhaustive DFS.
fn count_paths(adj: &[Vec<usize>], at: usize, to: usize, seen: &mut Vec<bool>) -> usize {
    if at == to {
        return 1;
    }
    seen[at] = true;
    let mut total = 0;
    for &nb in &adj[at] {
        if !seen[nb] {
            total += count_paths(adj, nb, to, seen);
        }
    }
    seen[at] = false;
    total
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

#[test]
fn exactly_one_path_between_bus_pairs() {
    let net = load_ieee33();
    let n = net.n_buses();
    let mut adj = vec![Vec::new(); n];
    let mut parent: Vec<usize> = (0..n).collect();
    for br in &net.branches {
        let (a, b) = (
            net.bus_index(br.from).unwrap(),
            net.bus_index(br.to).unwrap(),
        );
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        assert_ne!(ra, rb, "branch {}-{} closes a cycle", br.from, br.to);
        parent[ra] = rb;
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let (a, b) = (rng.below(n), rng.below(n));
        assert_eq!(find(&mut parent, a), find(&mut parent, b));
        assert_eq!(count_paths(&adj, a, b, &mut vec![false; n]), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaled_laplacian_ignores_common_impedance_scale(k in 0.01f64..100.0) {
        let net = load_ieee33();
        let mut scaled = net.clone();
        for br in &mut scaled.branches {
            br.r *= k;
            br.x *= k;
        }
        let a = graph_spectrum(&net).unwrap().scaled_laplacian;
        let b = graph_spectrum(&scaled).unwrap().scaled_laplacian;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_tree_spectrum_bounds(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut w = Tensor::zeros(&[n, n]);
        for i in 1..n {
            let p = rng.below(i);
            let y = rng.uniform_in(0.1, 5.0);
            w.set(i, p, y);
            w.set(p, i, y);
        }
        let s = spectrum_from_adjacency(w).unwrap();
        let ev = eigenvalues(&s.laplacian);
        prop_assert!(ev[0].abs() <= 1e-10);
        prop_assert!(ev[n - 1] <= 2.0 + 1e-10);
        prop_assert!(eigenvalues(&s.scaled_laplacian).iter().all(|x| x.abs() <= 1.0 + 1e-9));
    }
}
