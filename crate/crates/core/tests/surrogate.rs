use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use wpo_core::grid::{graph_spectrum, load_ieee33, spectrum_from_adjacency, GraphSpectrum};
use wpo_core::numerics::{sample_dirichlet, Rng, Tensor, WeightVector};
use wpo_core::surrogate::{
    cheb_conv, node_features, read_samples_csv, sop_pool, split_samples, surrogate_forward,
    surrogate_grad, train_surrogate, write_samples_csv, SurrogateArch, SurrogateModel,
    SurrogateSample, SurrogateTrainConfig,
};

fn random_graph(n: usize, rng: &mut Rng) -> Tensor {
    let mut w = Tensor::zeros(&[n, n]);
    // spanning tree plus a few chords
    for i in 1..n {
        let p = rng.below(i);
        let y = rng.uniform_in(0.2, 3.0);
        w.set(i, p, y);
        w.set(p, i, y);
    }
    for _ in 0..n / 2 {
        let (a, b) = (rng.below(n), rng.below(n));
        if a != b {
            let y = rng.uniform_in(0.2, 3.0);
            w.set(a, b, y);
            w.set(b, a, y);
        }
    }
    w
}

fn cheb(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => 2.0 * x * cheb(k - 1, x) - cheb(k - 2, x),
    }
}

/// Cyclic Jacobi eigendecomposition; returns (eigenvalues, column eigenvectors).
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum();
        if off < 1e-32 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// `sum_k U T_k(Lambda) U^T X theta_k` from a dense eigendecomposition.
fn spectral_oracle(s: &GraphSpectrum, x: &Tensor, coeffs: &[Tensor]) -> DMatrix<f64> {
    let (n, c) = x.as_2d();
    let lap = DMatrix::from_fn(n, n, |i, j| s.scaled_laplacian.get(i, j));
    let (vals, vecs) = jacobi_eigen(&lap);
    let xm = DMatrix::from_fn(n, c, |i, j| x.get(i, j));
    let f = coeffs[0].cols();
    let mut out = DMatrix::zeros(n, f);
    for (k, th) in coeffs.iter().enumerate() {
        let g =
            DMatrix::from_diagonal(&DVector::from_iterator(n, vals.iter().map(|l| cheb(k, *l))));
        let filt = &vecs * g * vecs.transpose();
        let thm = DMatrix::from_fn(c, f, |i, j| th.get(i, j));
        out += filt * &xm * thm;
    }
    out
}

fn random_tensor(r: usize, c: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect())
}

fn landscape(count: usize, seed: u64) -> Vec<SurrogateSample> {
    let mut rng = Rng::new(seed);
    let u = 1.0 / 12.0;
    (0..count)
        .map(|_| {
            let w = sample_dirichlet(1.0, 12, &mut rng).unwrap();
            let pdpl = w.as_slice().iter().map(|x| (x - u) * (x - u)).sum();
            SurrogateSample { w, pdpl }
        })
        .collect()
}

fn model(seed: u64) -> SurrogateModel {
    SurrogateModel::for_network(&load_ieee33(), SurrogateArch::default(), seed).unwrap()
}

#[test]
fn node_features_pad_with_zeros() {
    let net = load_ieee33();
    let x = node_features(&WeightVector::uniform(12), &net).unwrap();
    assert_eq!(x.shape(), &[33, 1]);
    assert_eq!(x.data().iter().filter(|v| **v == 1.0 / 12.0).count(), 12);
    assert_eq!(x.data().iter().filter(|v| **v == 0.0).count(), 21);
    let j = net.ul_nodes.iter().position(|&id| id == 18).unwrap();
    let e = node_features(&WeightVector::vertex(12, j), &net).unwrap();
    assert_eq!(e.data().iter().filter(|v| **v != 0.0).count(), 1);
    assert_eq!(e.get(net.bus_index(18).unwrap(), 0), 1.0);
    assert!(node_features(&WeightVector::uniform(5), &net).is_err());
}

#[test]
fn low_order_cheb_conv_definitions() {
    let mut rng = Rng::new(1);
    let s = spectrum_from_adjacency(random_graph(6, &mut rng)).unwrap();
    let x = random_tensor(6, 2, &mut rng);
    let t0 = random_tensor(2, 3, &mut rng);
    let t1 = random_tensor(2, 3, &mut rng);
    let one = cheb_conv(&x, &s, std::slice::from_ref(&t0)).unwrap();
    assert!(one.max_abs_diff(&x.matmul(&t0).unwrap()) <= 1e-14);
    let two = cheb_conv(&x, &s, &[t0.clone(), t1.clone()]).unwrap();
    let want = x.matmul(&t0).unwrap().zip(
        &s.scaled_laplacian.matmul(&x).unwrap().matmul(&t1).unwrap(),
        |a, b| a + b,
    );
    assert!(two.max_abs_diff(&want.unwrap()) <= 1e-14);
    assert!(cheb_conv(&random_tensor(5, 2, &mut rng), &s, &[t0]).is_err());
}

#[test]
fn cheb_conv_matches_spectral_oracle() {
    let mut rng = Rng::new(2);
    for n in 2..=8 {
        for _ in 0..10 {
            let s = spectrum_from_adjacency(random_graph(n, &mut rng)).unwrap();
            let x = random_tensor(n, 1, &mut rng);
            let k = 1 + rng.below(4);
            let coeffs: Vec<Tensor> = (0..k).map(|_| random_tensor(1, 8, &mut rng)).collect();
            let got = cheb_conv(&x, &s, &coeffs).unwrap();
            let want = spectral_oracle(&s, &x, &coeffs);
            for i in 0..n {
                for j in 0..8 {
                    assert!(
                        (got.get(i, j) - want[(i, j)]).abs() <= 1e-10,
                        "n={n} K={k} {} {}",
                        got.get(i, j),
                        want[(i, j)]
                    );
                }
            }
        }
    }
}

#[test]
fn sop_pool_examples() {
    assert_eq!(
        sop_pool(
            &Tensor::matrix(1, 1, vec![3.0]),
            &Tensor::matrix(1, 1, vec![1.0])
        )
        .unwrap(),
        vec![9.0]
    );
    let mut rng = Rng::new(3);
    let xg = random_tensor(5, 3, &mut rng);
    let gram = xg.transpose().matmul(&xg).unwrap();
    assert_eq!(
        sop_pool(&xg, &Tensor::identity(3)).unwrap(),
        gram.data().to_vec()
    );
    let h = sop_pool(
        &random_tensor(33, 8, &mut rng),
        &random_tensor(8, 8, &mut rng),
    )
    .unwrap();
    assert_eq!(h.len(), 64);
    assert!(sop_pool(&xg, &Tensor::identity(4)).is_err());
}

#[test]
fn sop_pool_ignores_node_order() {
    let mut rng = Rng::new(4);
    let xg = random_tensor(9, 8, &mut rng);
    let b = random_tensor(8, 8, &mut rng);
    let base = sop_pool(&xg, &b).unwrap();
    let m = DMatrix::from_row_slice(8, 8, &base);
    let tol = 1e-9 * m.amax();
    assert!(m.symmetric_eigen().eigenvalues.iter().all(|l| *l >= -tol));
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let p = Tensor::matrix(
            9,
            8,
            perm.iter().flat_map(|&r| xg.row(r).to_vec()).collect(),
        );
        let h = sop_pool(&p, &b).unwrap();
        assert!(h
            .iter()
            .zip(&base)
            .all(|(a, c)| (a - c).abs() <= 1e-10 * (1.0 + c.abs())));
    }
}

#[test]
fn zero_model_is_flat() {
    let z = model(0).zeroed();
    let w = WeightVector::uniform(12);
    assert_eq!(surrogate_forward(&z, &w).unwrap(), 0.0);
    assert!(surrogate_grad(&z, &w).unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn paper_pooling_shape() {
    let m = model(0);
    assert_eq!(m.arch.flatten_dim(), 64);
    assert_eq!(m.pool_map().shape(), &[8, 8]);
    assert_eq!(m.head()[0].shape(), &[64, 16]);
    assert_eq!(m.head()[2].shape(), &[16, 1]);
    assert_eq!(m.n_params(), m.arch.n_params());
}

/// Relabels buses of the 33-bus spectrum by `perm` (new row r holds old row perm[r]).
fn permuted_model(m: &SurrogateModel, perm: &[usize]) -> SurrogateModel {
    let n = perm.len();
    let adj = &m.spectrum.adjacency;
    let padj = Tensor::matrix(
        n,
        n,
        (0..n * n)
            .map(|k| adj.get(perm[k / n], perm[k % n]))
            .collect(),
    );
    let spectrum = spectrum_from_adjacency(padj).unwrap();
    let mut inv = vec![0; n];
    for (r, &old) in perm.iter().enumerate() {
        inv[old] = r;
    }
    let rows = m.ul_rows.iter().map(|&r| inv[r]).collect();
    let mut p = SurrogateModel::new(m.arch.clone(), spectrum, rows, 0).unwrap();
    p.params = m.params.clone();
    p
}

#[test]
fn forward_and_grad_are_permutation_covariant() {
    let m = model(5);
    let mut rng = Rng::new(6);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..33).collect();
        rng.shuffle(&mut perm);
        let p = permuted_model(&m, &perm);
        let w = sample_dirichlet(1.0, 12, &mut rng).unwrap();
        let (a, b) = (
            surrogate_forward(&m, &w).unwrap(),
            surrogate_forward(&p, &w).unwrap(),
        );
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        let (ga, gb) = (
            surrogate_grad(&m, &w).unwrap(),
            surrogate_grad(&p, &w).unwrap(),
        );
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() <= 1e-10));
    }
    // permuting the weight vector moves the gradient with it when UL rows swap
    let mut swapped = m.clone();
    swapped.ul_rows.swap(0, 1);
    let w = sample_dirichlet(1.0, 12, &mut rng).unwrap();
    let mut ws = w.as_slice().to_vec();
    ws.swap(0, 1);
    let mut g = surrogate_grad(&m, &w).unwrap();
    g.swap(0, 1);
    let gs = swapped.grad(&ws).unwrap();
    assert!(g.iter().zip(&gs).all(|(x, y)| (x - y).abs() <= 1e-10));
}

#[test]
fn grad_matches_finite_differences() {
    let m = model(7);
    let mut rng = Rng::new(8);
    let h = 1e-5;
    for _ in 0..20 {
        let w = sample_dirichlet(1.0, 12, &mut rng).unwrap();
        let g = surrogate_grad(&m, &w).unwrap();
        let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
        for i in 0..12 {
            let mut up = w.as_slice().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (m.forward(&up).unwrap() - m.forward(&dn).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() / scale <= 1e-4,
                "coord {i}: fd {fd} tape {}",
                g[i]
            );
        }
    }
}

#[test]
fn lipschitz_bound_covers_measured_slopes() {
    let m = model(9);
    let bound = m.lipschitz_bound().unwrap();
    let mut rng = Rng::new(10);
    for _ in 0..1000 {
        let a = sample_dirichlet(1.0, 12, &mut rng).unwrap();
        let b = sample_dirichlet(1.0, 12, &mut rng).unwrap();
        let d: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let slope = (m.forward(a.as_slice()).unwrap() - m.forward(b.as_slice()).unwrap()).abs() / d;
        assert!(slope <= bound, "slope {slope} bound {bound}");
    }
}

#[test]
fn learns_analytic_landscape() {
    let samples = landscape(500, 11);
    let cfg = SurrogateTrainConfig {
        seed: 1,
        ..SurrogateTrainConfig::default()
    };
    let fit = train_surrogate(&load_ieee33(), &samples, &cfg).unwrap();
    assert!(fit.test_mse <= 1e-3, "test MSE {}", fit.test_mse);
    assert!(fit.epoch_loss.windows(2).all(|p| p[1] <= p[0]));
    assert_eq!(fit.train_idx.len() + fit.test_idx.len(), 500);
}

#[test]
fn constant_targets_are_reproduced() {
    let mut samples = landscape(40, 12);
    for s in &mut samples {
        s.pdpl = 0.37;
    }
    let cfg = SurrogateTrainConfig::default();
    let fit = train_surrogate(&load_ieee33(), &samples, &cfg).unwrap();
    let mut rng = Rng::new(13);
    for _ in 0..20 {
        let w = sample_dirichlet(1.0, 12, &mut rng).unwrap();
        let p = fit.model.predict_pdpl(w.as_slice()).unwrap();
        assert!((p - 0.37).abs() <= 1e-3, "{p}");
    }
}

#[test]
fn duplicated_dataset_gives_the_same_fit() {
    let samples = landscape(30, 14);
    let doubled: Vec<SurrogateSample> = samples.iter().chain(&samples).cloned().collect();
    let cfg = SurrogateTrainConfig {
        epochs: 20,
        ..SurrogateTrainConfig::default()
    };
    let a = train_surrogate(&load_ieee33(), &samples, &cfg).unwrap();
    let b = train_surrogate(&load_ieee33(), &doubled, &cfg).unwrap();
    for (x, y) in a.model.params.iter().zip(&b.model.params) {
        assert!(x.max_abs_diff(y) <= 1e-9, "{}", x.max_abs_diff(y));
    }
    assert!((a.test_mse - b.test_mse).abs() <= 1e-9);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let samples = landscape(20, 15);
    let cfg = SurrogateTrainConfig {
        epochs: 50,
        ..SurrogateTrainConfig::default()
    };
    let a = train_surrogate(&load_ieee33(), &samples, &cfg).unwrap();
    let b = train_surrogate(&load_ieee33(), &samples, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("surrogate.json");
    a.model.save(&p).unwrap();
    assert_eq!(SurrogateModel::load(&p).unwrap(), a.model);
}

#[test]
fn split_contract() {
    let samples = landscape(50, 16);
    assert!(split_samples(&samples[..9], 0.2, 0).is_err());
    let (tr, te) = split_samples(&samples, 0.2, 0).unwrap();
    assert_eq!(te.len(), 10);
    assert!(tr.iter().all(|i| !te.contains(i)));
    // order-independent: reversing the samples maps to the same weight sets
    let rev: Vec<SurrogateSample> = samples.iter().rev().cloned().collect();
    let (_, te2) = split_samples(&rev, 0.2, 0).unwrap();
    let mut a: Vec<_> = te
        .iter()
        .map(|&i| samples[i].w.clone().into_vec())
        .collect();
    let mut b: Vec<_> = te2.iter().map(|&i| rev[i].w.clone().into_vec()).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(a, b);
}

#[test]
fn samples_csv_round_trip() {
    let samples = landscape(12, 17);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ds.csv");
    let ids = load_ieee33().ul_nodes;
    write_samples_csv(&p, &ids, &samples).unwrap();
    let (back_ids, back) = read_samples_csv(&p).unwrap();
    assert_eq!(back_ids, ids);
    for (a, b) in back.iter().zip(&samples) {
        assert!(a
            .w
            .as_slice()
            .iter()
            .zip(b.w.as_slice())
            .all(|(x, y)| (x - y).abs() <= 1e-11));
        assert!((a.pdpl - b.pdpl).abs() <= 1e-11 * b.pdpl.abs().max(1e-12));
    }
}

#[test]
fn ieee33_spectrum_feeds_the_model() {
    let m = model(0);
    assert_eq!(m.spectrum, graph_spectrum(&load_ieee33()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_mass_is_preserved(seed in any::<u64>(), alpha in 0.1f64..3.0) {
        let w = sample_dirichlet(alpha, 12, &mut Rng::new(seed)).unwrap();
        let x = node_features(&w, &load_ieee33()).unwrap();
        prop_assert!((x.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_is_finite_on_the_simplex(seed in any::<u64>()) {
        let m = model(seed % 7);
        let w = sample_dirichlet(0.5, 12, &mut Rng::new(seed)).unwrap();
        prop_assert!(surrogate_forward(&m, &w).unwrap().is_finite());
    }
}
