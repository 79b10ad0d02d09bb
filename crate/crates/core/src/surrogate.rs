//! Graph surrogate mapping a weight vector to PDPL.
//!
//! Weights sit on the UL buses of the full bus graph (zeros elsewhere), pass
//! through a Chebyshev convolution and tanh, are read out by bilinear
//! second-order pooling `flatten(B^T X^T X B)`, then a dense head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::NamedParam;
use crate::grid::{graph_spectrum, GraphSpectrum, Network};
use crate::numerics::linalg::symmetric_eigen;
use crate::numerics::optim::{xavier, OptimState, Optimizer};
use crate::numerics::{check_simplex, Rng, Tape, Tensor, Var, WeightVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateArch {
    /// Number of Chebyshev terms K^s.
    pub k_order: usize,
    /// Convolution output channels f.
    pub channels: usize,
    /// Pooling width b; the flattened readout has b*b entries.
    pub pool: usize,
    pub hidden: usize,
    /// Use orders 0..K-1 when true, 1..K when false.
    pub include_order0: bool,
}

impl Default for SurrogateArch {
    fn default() -> Self {
        SurrogateArch {
            k_order: 3,
            channels: 8,
            pool: 8,
            hidden: 16,
            include_order0: true,
        }
    }
}

impl SurrogateArch {
    pub fn validate(&self) -> Result<()> {
        if self.k_order < 1 || self.channels < 1 || self.pool < 1 || self.hidden < 1 {
            return Err(Error::InvalidArgument(format!(
                "surrogate architecture needs positive sizes: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn orders(&self) -> Vec<usize> {
        if self.include_order0 {
            (0..self.k_order).collect()
        } else {
            (1..=self.k_order).collect()
        }
    }

    pub fn flatten_dim(&self) -> usize {
        self.pool * self.pool
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut s: Vec<(String, Vec<usize>)> = self
            .orders()
            .iter()
            .map(|k| (format!("cheb.theta{k}"), vec![1, self.channels]))
            .collect();
        s.push(("pool.b".into(), vec![self.channels, self.pool]));
        s.push(("fc1.w".into(), vec![self.flatten_dim(), self.hidden]));
        s.push(("fc1.b".into(), vec![self.hidden]));
        s.push(("fc2.w".into(), vec![self.hidden, 1]));
        s.push(("fc2.b".into(), vec![1]));
        s
    }

    pub fn n_params(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        let (f, b, d, h) = (self.channels, self.pool, self.flatten_dim(), self.hidden);
        let mut p: Vec<Tensor> = self
            .orders()
            .iter()
            .map(|_| xavier(&[1, f], self.k_order, f, rng))
            .collect();
        p.push(xavier(&[f, b], f, b, rng));
        p.push(xavier(&[d, h], d, h, rng));
        p.push(Tensor::zeros(&[h]));
        p.push(xavier(&[h, 1], h, 1, rng));
        p.push(Tensor::zeros(&[1]));
        p
    }
}

/// One `(w, PDPL)` pair of the surrogate dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSample {
    pub w: WeightVector,
    pub pdpl: f64,
}

/// Min-max scaling of PDPL targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub min: f64,
    pub range: f64,
}

impl Default for TargetScale {
    fn default() -> Self {
        TargetScale {
            min: 0.0,
            range: 1.0,
        }
    }
}

impl TargetScale {
    /// Spans `values`; a constant set gets range 1.
    pub fn fit(values: &[f64]) -> TargetScale {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if max > min { max - min } else { 1.0 };
        TargetScale { min, range }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.range
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        self.min + z * self.range
    }
}

/// A differentiable function of the weight vector.
pub trait WeightObjective {
    fn value(&self, w: &[f64]) -> Result<f64>;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Per-bus single-channel features: `w_i` on UL rows, zero elsewhere.
pub fn node_features(w: &WeightVector, net: &Network) -> Result<Tensor> {
    node_features_rows(w.as_slice(), net.n_buses(), &net.ul_indices()?)
}

pub fn node_features_rows(w: &[f64], n_nodes: usize, ul_rows: &[usize]) -> Result<Tensor> {
    if w.len() != ul_rows.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} UL nodes",
            w.len(),
            ul_rows.len()
        )));
    }
    let mut x = vec![0.0; n_nodes];
    for (&r, &wi) in ul_rows.iter().zip(w) {
        if r >= n_nodes {
            return Err(Error::Shape(format!(
                "UL row {r} outside a graph of {n_nodes} nodes"
            )));
        }
        x[r] = wi;
    }
    Ok(Tensor::matrix(n_nodes, 1, x))
}

/// `T_k(L~) X` for every requested order.
pub fn cheb_basis(x: &Tensor, scaled_laplacian: &Tensor, orders: &[usize]) -> Result<Vec<Tensor>> {
    let (n, _) = x.as_2d();
    if scaled_laplacian.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "Laplacian {:?} for {n} rows",
            scaled_laplacian.shape()
        )));
    }
    let top = orders.iter().copied().max().unwrap_or(0);
    let mut terms = vec![x.clone()];
    if top >= 1 {
        terms.push(scaled_laplacian.matmul(x)?);
    }
    for _ in 2..=top {
        let k = terms.len();
        let next = scaled_laplacian
            .matmul(&terms[k - 1])?
            .zip(&terms[k - 2], |a, b| 2.0 * a - b)?;
        terms.push(next);
    }
    Ok(orders.iter().map(|&k| terms[k].clone()).collect())
}

/// `X_G = sum_k T_k(L~) X theta_k` over orders `0..coeffs.len()`.
pub fn cheb_conv(x: &Tensor, spectrum: &GraphSpectrum, coeffs: &[Tensor]) -> Result<Tensor> {
    let orders: Vec<usize> = (0..coeffs.len()).collect();
    cheb_conv_orders(x, &spectrum.scaled_laplacian, coeffs, &orders)
}

pub fn cheb_conv_orders(
    x: &Tensor,
    scaled_laplacian: &Tensor,
    coeffs: &[Tensor],
    orders: &[usize],
) -> Result<Tensor> {
    if coeffs.is_empty() || coeffs.len() != orders.len() {
        return Err(Error::Shape(format!(
            "{} coefficient matrices for {} orders",
            coeffs.len(),
            orders.len()
        )));
    }
    let (n, c) = x.as_2d();
    let f = coeffs[0].cols();
    for th in coeffs {
        if th.shape() != [c, f] {
            return Err(Error::Shape(format!(
                "coefficient {:?}, expected [{c}, {f}]",
                th.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(&[n, f]);
    for (z, th) in cheb_basis(x, scaled_laplacian, orders)?.iter().zip(coeffs) {
        out = out.zip(&z.matmul(th)?, |a, b| a + b)?;
    }
    Ok(out)
}

/// `flatten(B^T X_G^T X_G B)`, row-major, length `b*b`.
pub fn sop_pool(xg: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if xg.shape().len() != 2 || b.shape().len() != 2 || xg.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "pooling {:?} with B {:?}",
            xg.shape(),
            b.shape()
        )));
    }
    let y = xg.matmul(b)?;
    Ok(y.transpose().matmul(&y)?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub arch: SurrogateArch,
    pub spectrum: GraphSpectrum,
    /// Graph row of every UL node, in weight order.
    pub ul_rows: Vec<usize>,
    /// Chebyshev coefficients, pooling map B, then the dense head.
    pub params: Vec<Tensor>,
    pub scale: TargetScale,
    pub seed: u64,
}

impl SurrogateModel {
    pub fn new(
        arch: SurrogateArch,
        spectrum: GraphSpectrum,
        ul_rows: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let n = spectrum.scaled_laplacian.rows();
        if let Some(r) = ul_rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!(
                "UL row {r} outside a graph of {n} nodes"
            )));
        }
        let params = arch.init(&mut Rng::new(seed).fork(7));
        Ok(SurrogateModel {
            arch,
            spectrum,
            ul_rows,
            params,
            scale: TargetScale::default(),
            seed,
        })
    }

    pub fn for_network(net: &Network, arch: SurrogateArch, seed: u64) -> Result<Self> {
        SurrogateModel::new(arch, graph_spectrum(net)?, net.ul_indices()?, seed)
    }

    pub fn zeroed(&self) -> Self {
        SurrogateModel {
            params: self
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
            ..self.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn n_ul(&self) -> usize {
        self.ul_rows.len()
    }

    pub fn cheb_coeffs(&self) -> &[Tensor] {
        &self.params[..self.arch.orders().len()]
    }

    pub fn pool_map(&self) -> &Tensor {
        &self.params[self.arch.orders().len()]
    }

    /// Dense head `[W1, b1, W2, b2]`.
    pub fn head(&self) -> &[Tensor] {
        &self.params[self.arch.orders().len() + 1..]
    }

    fn graph_nodes(&self) -> usize {
        self.spectrum.scaled_laplacian.rows()
    }

    /// Features `[N, S]`, one column per weight vector.
    fn batch_features(&self, ws: &[&[f64]]) -> Result<Tensor> {
        let n = self.graph_nodes();
        let s = ws.len();
        let mut x = vec![0.0; n * s];
        for (j, w) in ws.iter().enumerate() {
            let col = node_features_rows(w, n, &self.ul_rows)?;
            for (r, v) in col.data().iter().enumerate() {
                x[r * s + j] = *v;
            }
        }
        Ok(Tensor::matrix(n, s, x))
    }

    /// Network output `[S, 1]` (normalized units) for features `x [N, S]`.
    fn build(&self, t: &mut Tape, p: &[Var], x: Var) -> Var {
        let n = self.graph_nodes();
        let s = t.value(x).cols();
        let orders = self.arch.orders();
        let top = *orders.last().expect("nonempty orders");
        let lap = t.constant(self.spectrum.scaled_laplacian.clone());
        let mut terms = vec![x];
        if top >= 1 {
            terms.push(t.matmul(lap, x));
        }
        for k in 2..=top {
            let lz = t.matmul(lap, terms[k - 1]);
            let lz2 = t.scale(lz, 2.0);
            terms.push(t.sub(lz2, terms[k - 2]));
        }
        let zs: Vec<Var> = orders
            .iter()
            .map(|&k| {
                let z = t.transpose(terms[k]);
                t.reshape(z, &[s * n, 1])
            })
            .collect();
        self.build_from_basis(t, p, &zs, s)
    }

    /// Columns `T_k(L~) X` flattened sample-major to `[S*N, 1]`, one per order.
    fn basis_columns(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (n, s) = x.as_2d();
        cheb_basis(x, &self.spectrum.scaled_laplacian, &self.arch.orders())?
            .into_iter()
            .map(|z| z.transpose().reshape(&[s * n, 1]))
            .collect()
    }

    fn build_from_basis(&self, t: &mut Tape, p: &[Var], zs: &[Var], s: usize) -> Var {
        let mut acc: Option<Var> = None;
        for (j, z) in zs.iter().enumerate() {
            let term = t.matmul(*z, p[j]);
            acc = Some(match acc {
                None => term,
                Some(a) => t.add(a, term),
            });
        }
        let m = zs.len();
        let xg = t.tanh(acc.expect("nonempty orders"));
        let y = t.matmul(xg, p[m]);
        let pooled = t.block_gram(y, s);
        let h = t.matmul(pooled, p[m + 1]);
        let h = t.add_row(h, p[m + 2]);
        let h = t.tanh(h);
        let o = t.matmul(h, p[m + 3]);
        t.add_row(o, p[m + 4])
    }

    /// Raw network outputs (normalized PDPL units) for a batch of weights.
    pub fn forward_batch(&self, ws: &[&[f64]]) -> Result<Vec<f64>> {
        if ws.is_empty() {
            return Ok(Vec::new());
        }
        let basis = self.basis_columns(&self.batch_features(ws)?)?;
        let mut t = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|q| t.constant(q.clone())).collect();
        let zs: Vec<Var> = basis.into_iter().map(|z| t.constant(z)).collect();
        let out = self.build_from_basis(&mut t, &p, &zs, ws.len());
        Ok(t.value(out).data().to_vec())
    }

    /// `phi(w)` in normalized units.
    pub fn forward(&self, w: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(&[w])?[0])
    }

    /// `phi(w)` in PDPL units.
    pub fn predict_pdpl(&self, w: &[f64]) -> Result<f64> {
        Ok(self.scale.denormalize(self.forward(w)?))
    }

    /// `d phi / d w` (normalized units), UL order.
    pub fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|q| t.constant(q.clone())).collect();
        let x = t.leaf(self.batch_features(&[w])?);
        let out = self.build(&mut t, &p, x);
        let g = t.backward(out)?.wrt(x);
        Ok(self.ul_rows.iter().map(|&r| g.data()[r]).collect())
    }

    /// Mean squared error against normalized targets and its parameter gradient.
    fn loss_and_grad(
        &self,
        params: &[Tensor],
        basis: &[Tensor],
        y: &Tensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let p: Vec<Var> = params.iter().map(|q| t.leaf(q.clone())).collect();
        let zs: Vec<Var> = basis.iter().map(|z| t.constant(z.clone())).collect();
        let out = self.build_from_basis(&mut t, &p, &zs, y.rows());
        let yv = t.constant(y.clone());
        let d = t.sub(out, yv);
        let d2 = t.square(d);
        let loss = t.mean(d2);
        let g = t.backward(loss)?;
        Ok((t.value(loss).item(), p.iter().map(|v| g.wrt(*v)).collect()))
    }

    /// Upper bound on the Euclidean Lipschitz constant of `forward` over the
    /// simplex: conv norm, times the pooling bound `2 |Y| |B|^2` with `|Y|`
    /// bounded by tanh and by the conv norm, times the head norms.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        let lap = &self.spectrum.scaled_laplacian;
        let (vals, _) = symmetric_eigen(lap)?;
        let mut conv = 0.0;
        for (k, th) in self.arch.orders().iter().zip(self.cheb_coeffs()) {
            let tk = vals
                .iter()
                .map(|&l| cheb_scalar(*k, l).abs())
                .fold(0.0, f64::max);
            conv += tk * th.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let y_max = (conv).min(((self.graph_nodes() * self.arch.channels) as f64).sqrt());
        let b = op_norm(self.pool_map())?;
        let h = self.head();
        Ok(conv * 2.0 * y_max * b * b * op_norm(&h[0])? * op_norm(&h[2])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = SurrogateCheckpoint {
            format: "wpo-surrogate-v1".into(),
            arch: self.arch.clone(),
            spectrum: self.spectrum.clone(),
            ul_rows: self.ul_rows.clone(),
            params: named(&self.arch.shapes(), &self.params),
            scale: self.scale,
            seed: self.seed,
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: SurrogateCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let params = unnamed(&ck.arch.shapes(), &ck.params)?;
        Ok(SurrogateModel {
            arch: ck.arch,
            spectrum: ck.spectrum,
            ul_rows: ck.ul_rows,
            params,
            scale: ck.scale,
            seed: ck.seed,
        })
    }
}

impl WeightObjective for SurrogateModel {
    fn value(&self, w: &[f64]) -> Result<f64> {
        self.forward(w)
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        SurrogateModel::grad(self, w)
    }
}

pub fn surrogate_forward(model: &SurrogateModel, w: &WeightVector) -> Result<f64> {
    model.forward(w.as_slice())
}

pub fn surrogate_grad(model: &SurrogateModel, w: &WeightVector) -> Result<Vec<f64>> {
    model.grad(w.as_slice())
}

fn cheb_scalar(k: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    match k {
        0 => a,
        _ => {
            for _ in 1..k {
                let c = 2.0 * x * b - a;
                a = b;
                b = c;
            }
            b
        }
    }
}

/// Spectral norm via the eigenvalues of `A^T A`.
fn op_norm(a: &Tensor) -> Result<f64> {
    let ata = a.transpose().matmul(a)?;
    let (vals, _) = symmetric_eigen(&ata)?;
    Ok(vals.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

#[derive(Serialize, Deserialize)]
struct SurrogateCheckpoint {
    format: String,
    arch: SurrogateArch,
    spectrum: GraphSpectrum,
    ul_rows: Vec<usize>,
    params: Vec<NamedParam>,
    scale: TargetScale,
    seed: u64,
}

fn named(shapes: &[(String, Vec<usize>)], params: &[Tensor]) -> Vec<NamedParam> {
    shapes
        .iter()
        .zip(params)
        .map(|((name, shape), t)| NamedParam {
            name: name.clone(),
            shape: shape.clone(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn unnamed(shapes: &[(String, Vec<usize>)], named: &[NamedParam]) -> Result<Vec<Tensor>> {
    if shapes.len() != named.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} arrays, expected {}",
            named.len(),
            shapes.len()
        )));
    }
    shapes
        .iter()
        .zip(named)
        .map(|((name, shape), p)| {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Shape(format!(
                    "checkpoint array {} {:?}, expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
            Tensor::new(shape.clone(), p.data.clone())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateTrainConfig {
    pub arch: SurrogateArch,
    /// Full-batch steps.
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            arch: SurrogateArch::default(),
            epochs: 3000,
            lr: 0.003,
            optimizer: Optimizer::default(),
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SurrogateTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0)
            || self.epochs < 1
            || !(self.test_fraction > 0.0 && self.test_fraction < 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "surrogate training needs lr > 0, epochs >= 1, test_fraction in (0, 1) (got {}, {}, {})",
                self.lr, self.epochs, self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurrogateFit<M> {
    pub model: M,
    /// Normalized-unit MSE on each split.
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Accepted full-batch training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

const SPLIT_MIN_SAMPLES: usize = 10;

fn fnv1a(words: impl Iterator<Item = u64>, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Train/test index split. Samples with bitwise-equal weights land on the
/// same side, and the split does not depend on sample order.
pub fn split_samples(
    samples: &[SurrogateSample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if samples.len() < SPLIT_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "surrogate training needs at least {SPLIT_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups
            .entry(s.w.as_slice().iter().map(|v| v.to_bits()).collect())
            .or_default()
            .push(i);
    }
    let mut keyed: Vec<(u64, Vec<usize>)> = groups
        .into_iter()
        .map(|(k, idx)| (fnv1a(k.into_iter(), seed), idx))
        .collect();
    keyed.sort();
    let n_test = ((keyed.len() as f64 * test_fraction).round() as usize).clamp(1, keyed.len() - 1);
    let mut test: Vec<usize> = keyed[..n_test]
        .iter()
        .flat_map(|(_, i)| i.clone())
        .collect();
    let mut train: Vec<usize> = keyed[n_test..]
        .iter()
        .flat_map(|(_, i)| i.clone())
        .collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

const MAX_HALVINGS: usize = 40;
const RESTORE_AFTER: usize = 3;

/// Full-batch descent with backtracking: a step that raises the loss is
/// undone and retried at half the rate from fresh optimizer moments; the
/// rate doubles back toward the base after every three accepted steps. Accepted losses are therefore non-increasing.
fn fit_backtracking<F>(
    params: &mut Vec<Tensor>,
    cfg: &SurrogateTrainConfig,
    mut loss_grad: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let mut opt = OptimState::new(cfg.optimizer, params);
    let (mut loss, mut grads) = loss_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            detail: format!("initial loss {loss}"),
        });
    }
    let mut history = vec![loss];
    let mut lr = cfg.lr;
    let mut streak = 0;
    'epochs: for epoch in 1..cfg.epochs {
        for _ in 0..MAX_HALVINGS {
            let mut cand = params.clone();
            let mut cand_opt = opt.clone();
            cand_opt.step(&mut cand, &grads, lr);
            let (l, g) = loss_grad(&cand)?;
            if l.is_finite() && l <= loss {
                *params = cand;
                opt = cand_opt;
                loss = l;
                grads = g;
                history.push(loss);
                streak += 1;
                if streak >= RESTORE_AFTER {
                    lr = (2.0 * lr).min(cfg.lr);
                    streak = 0;
                }
                continue 'epochs;
            }
            // momentum may point uphill; restart the moments with the smaller rate
            lr *= 0.5;
            streak = 0;
            opt = OptimState::new(cfg.optimizer, params);
        }
        // no decrease at any tried rate: stationary to working precision
        let _ = epoch;
        break;
    }
    Ok(history)
}

fn targets(samples: &[SurrogateSample], idx: &[usize], scale: TargetScale) -> Tensor {
    Tensor::matrix(
        idx.len(),
        1,
        idx.iter()
            .map(|&i| scale.normalize(samples[i].pdpl))
            .collect(),
    )
}

fn check_samples(samples: &[SurrogateSample], n: usize) -> Result<()> {
    for (k, s) in samples.iter().enumerate() {
        if s.w.len() != n {
            return Err(Error::Shape(format!(
                "sample {k} has {} weights for {n} UL nodes",
                s.w.len()
            )));
        }
        check_simplex(s.w.as_slice())?;
        if !s.pdpl.is_finite() {
            return Err(Error::NonFinite(format!("sample {k} PDPL")));
        }
    }
    Ok(())
}

fn split_mse(pred: &[f64], samples: &[SurrogateSample], idx: &[usize], scale: TargetScale) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter()
        .zip(pred)
        .map(|(&i, p)| (p - scale.normalize(samples[i].pdpl)).powi(2))
        .sum::<f64>()
        / idx.len() as f64
}

/// Fits the graph surrogate on min-max normalized PDPL targets.
pub fn train_surrogate(
    net: &Network,
    samples: &[SurrogateSample],
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateFit<SurrogateModel>> {
    let model = SurrogateModel::for_network(net, cfg.arch.clone(), cfg.seed)?;
    train_surrogate_from(model, samples, cfg)
}

pub fn train_surrogate_from(
    mut model: SurrogateModel,
    samples: &[SurrogateSample],
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateFit<SurrogateModel>> {
    cfg.validate()?;
    check_samples(samples, model.n_ul())?;
    let (train_idx, test_idx) = split_samples(samples, cfg.test_fraction, cfg.seed)?;
    let scale = TargetScale::fit(&samples.iter().map(|s| s.pdpl).collect::<Vec<_>>());
    model.scale = scale;
    let ws =
        |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|&i| samples[i].w.as_slice()).collect() };
    let basis = model.basis_columns(&model.batch_features(&ws(&train_idx))?)?;
    let y = targets(samples, &train_idx, scale);
    let mut params = model.params.clone();
    let shell = model.clone();
    let epoch_loss = fit_backtracking(&mut params, cfg, |p| shell.loss_and_grad(p, &basis, &y))?;
    model.params = params;
    let train_mse = split_mse(
        &model.forward_batch(&ws(&train_idx))?,
        samples,
        &train_idx,
        scale,
    );
    let test_mse = split_mse(
        &model.forward_batch(&ws(&test_idx))?,
        samples,
        &test_idx,
        scale,
    );
    Ok(SurrogateFit {
        model,
        train_mse,
        test_mse,
        train_idx,
        test_idx,
        epoch_loss,
    })
}

/// Comparison surrogate: dense `n -> hidden -> hidden -> 1` on the raw weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSurrogate {
    pub n: usize,
    pub hidden: usize,
    /// `[W1, b1, W2, b2, W3, b3]`.
    pub params: Vec<Tensor>,
    pub scale: TargetScale,
    pub seed: u64,
}

impl MlpSurrogate {
    pub fn new(n: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(7);
        let params = vec![
            xavier(&[n, hidden], n, hidden, &mut rng),
            Tensor::zeros(&[hidden]),
            xavier(&[hidden, hidden], hidden, hidden, &mut rng),
            Tensor::zeros(&[hidden]),
            xavier(&[hidden, 1], hidden, 1, &mut rng),
            Tensor::zeros(&[1]),
        ];
        MlpSurrogate {
            n,
            hidden,
            params,
            scale: TargetScale::default(),
            seed,
        }
    }

    fn build(t: &mut Tape, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for layer in 0..3 {
            let z = t.matmul(h, p[2 * layer]);
            let z = t.add_row(z, p[2 * layer + 1]);
            h = if layer < 2 { t.tanh(z) } else { z };
        }
        h
    }

    fn inputs(&self, ws: &[&[f64]]) -> Result<Tensor> {
        if let Some(w) = ws.iter().find(|w| w.len() != self.n) {
            return Err(Error::Shape(format!(
                "{} weights for an MLP over {} inputs",
                w.len(),
                self.n
            )));
        }
        Ok(Tensor::matrix(
            ws.len(),
            self.n,
            ws.iter().flat_map(|w| w.iter().copied()).collect(),
        ))
    }

    pub fn forward_batch(&self, ws: &[&[f64]]) -> Result<Vec<f64>> {
        if ws.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|q| t.constant(q.clone())).collect();
        let x = t.constant(self.inputs(ws)?);
        let out = Self::build(&mut t, &p, x);
        Ok(t.value(out).data().to_vec())
    }

    pub fn predict_pdpl(&self, w: &[f64]) -> Result<f64> {
        Ok(self.scale.denormalize(self.forward_batch(&[w])?[0]))
    }
}

impl WeightObjective for MlpSurrogate {
    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(&[w])?[0])
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|q| t.constant(q.clone())).collect();
        let x = t.leaf(self.inputs(&[w])?);
        let out = Self::build(&mut t, &p, x);
        Ok(t.backward(out)?.wrt(x).into_data())
    }
}

pub fn train_mlp_surrogate(
    samples: &[SurrogateSample],
    hidden: usize,
    cfg: &SurrogateTrainConfig,
) -> Result<SurrogateFit<MlpSurrogate>> {
    cfg.validate()?;
    let n = samples
        .first()
        .map(|s| s.w.len())
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    check_samples(samples, n)?;
    let (train_idx, test_idx) = split_samples(samples, cfg.test_fraction, cfg.seed)?;
    let mut model = MlpSurrogate::new(n, hidden, cfg.seed);
    model.scale = TargetScale::fit(&samples.iter().map(|s| s.pdpl).collect::<Vec<_>>());
    let scale = model.scale;
    let ws =
        |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|&i| samples[i].w.as_slice()).collect() };
    let x = model.inputs(&ws(&train_idx))?;
    let y = targets(samples, &train_idx, scale);
    let mut params = model.params.clone();
    let epoch_loss = fit_backtracking(&mut params, cfg, |p| {
        let mut t = Tape::new();
        let pv: Vec<Var> = p.iter().map(|q| t.leaf(q.clone())).collect();
        let xv = t.constant(x.clone());
        let out = MlpSurrogate::build(&mut t, &pv, xv);
        let yv = t.constant(y.clone());
        let d = t.sub(out, yv);
        let d2 = t.square(d);
        let loss = t.mean(d2);
        let g = t.backward(loss)?;
        Ok((t.value(loss).item(), pv.iter().map(|v| g.wrt(*v)).collect()))
    })?;
    model.params = params;
    let train_mse = split_mse(
        &model.forward_batch(&ws(&train_idx))?,
        samples,
        &train_idx,
        scale,
    );
    let test_mse = split_mse(
        &model.forward_batch(&ws(&test_idx))?,
        samples,
        &test_idx,
        scale,
    );
    Ok(SurrogateFit {
        model,
        train_mse,
        test_mse,
        train_idx,
        test_idx,
        epoch_loss,
    })
}

/// Writes D^S as CSV: one column per UL node (header = node id), then `pdpl`.
pub fn write_samples_csv(
    path: &Path,
    node_ids: &[usize],
    samples: &[SurrogateSample],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = node_ids.iter().map(|id| id.to_string()).collect();
    header.push("pdpl".into());
    w.write_record(&header)?;
    for s in samples {
        if s.w.len() != node_ids.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} columns",
                s.w.len(),
                node_ids.len()
            )));
        }
        let mut row: Vec<String> =
            s.w.as_slice()
                .iter()
                .map(|v| crate::scenarios::fmt_f64(*v))
                .collect();
        row.push(crate::scenarios::fmt_f64(s.pdpl));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Twelve-digit text loses the exact unit sum; accept 1e-9 and rescale.
fn renormalize(w: &[f64], row: usize) -> Result<WeightVector> {
    let total: f64 = w.iter().sum();
    if !((total - 1.0).abs() <= 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "row {row}: weights sum to {total}"
        )));
    }
    WeightVector::new(w.iter().map(|v| v / total).collect())
}

/// Reads D^S written by [`write_samples_csv`] (or a labelled weight table);
/// returns node ids and samples.
pub fn read_samples_csv(path: &Path) -> Result<(Vec<usize>, Vec<SurrogateSample>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.clone();
    // weight tables carry a leading label column
    let first = usize::from(header.get(0) == Some("label"));
    let last = header
        .len()
        .checked_sub(1)
        .filter(|&j| j > first && &header[j] == "pdpl")
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{}: expected node columns followed by pdpl",
                path.display()
            ))
        })?;
    let ids = (first..last)
        .map(|j| {
            header[j]
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("column {j}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(first)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("row {}: {e}", line + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = last - first;
        out.push(SurrogateSample {
            w: renormalize(&vals[..n], line + 2)?,
            pdpl: vals[n],
        });
    }
    Ok((ids, out))
}
