//! Weighted graph-temporal forecasters: single-task models and a multi-task
//! model with one shared encoder and one head per weight setting.
//!
//! Encoder: temporal dense layer over each node's lag window, two Chebyshev
//! graph convolutions on the full bus graph (non-UL rows are zero-padded),
//! then a dense readout of the UL-node embeddings into one vector per sample.
//! Head: a two-layer perceptron from that vector to all n normalized loads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{graph_spectrum, Network};
use crate::numerics::optim::{xavier, OptimState, Optimizer};
use crate::numerics::{Rng, Tape, Tensor, Var, WeightVector};
use crate::scenarios::{ScenarioDataset, SupervisedBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastArch {
    pub graph_nodes: usize,
    /// Graph row of every UL node, in weight order.
    pub ul_rows: Vec<usize>,
    pub lag: usize,
    pub k_order: usize,
    /// Width of the temporal layer and the first convolution.
    pub width: usize,
    /// Per-node width after the second convolution.
    pub hidden: usize,
    /// Readout width fed to the heads.
    pub embed: usize,
    pub head_hidden: usize,
}

impl ForecastArch {
    /// Single-task default: width = hidden = embed = 16, head width 4.
    pub fn stl(net: &Network, lag: usize) -> Result<Self> {
        Ok(ForecastArch {
            graph_nodes: net.n_buses(),
            ul_rows: net.ul_indices()?,
            lag,
            k_order: 3,
            width: 16,
            hidden: 16,
            embed: 16,
            head_hidden: 4,
        })
    }

    /// Multi-task default: shared encoder twice as wide, same heads.
    pub fn mtl(net: &Network, lag: usize) -> Result<Self> {
        Ok(ForecastArch {
            width: 32,
            ..ForecastArch::stl(net, lag)?
        })
    }

    pub fn n_ul(&self) -> usize {
        self.ul_rows.len()
    }

    fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, h, k) = (self.width, self.hidden, self.k_order);
        let mut s = vec![
            ("temporal.w".into(), vec![self.lag, w]),
            ("temporal.b".into(), vec![w]),
        ];
        for j in 0..k {
            s.push((format!("cheb1.theta{j}"), vec![w, w]));
        }
        s.push(("cheb1.b".into(), vec![w]));
        for j in 0..k {
            s.push((format!("cheb2.theta{j}"), vec![w, h]));
        }
        s.push(("cheb2.b".into(), vec![h]));
        s.push(("readout.w".into(), vec![self.n_ul() * h, self.embed]));
        s.push(("readout.b".into(), vec![self.embed]));
        s
    }

    fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("head.w1".into(), vec![self.embed, self.head_hidden]),
            ("head.b1".into(), vec![self.head_hidden]),
            ("head.w2".into(), vec![self.head_hidden, self.n_ul()]),
            ("head.b2".into(), vec![self.n_ul()]),
        ]
    }

    /// |theta^S| by formula.
    pub fn encoder_params(&self) -> usize {
        let (w, h, k) = (self.width, self.hidden, self.k_order);
        let e = self.embed;
        self.lag * w + w + k * w * w + w + k * w * h + h + self.n_ul() * h * e + e
    }

    /// |theta^TS| by formula.
    pub fn head_params(&self) -> usize {
        let n = self.n_ul();
        self.embed * self.head_hidden + self.head_hidden + self.head_hidden * n + n
    }

    fn init_encoder(&self, rng: &mut Rng) -> Vec<Tensor> {
        let (w, h, k) = (self.width, self.hidden, self.k_order);
        let mut p = vec![
            xavier(&[self.lag, w], self.lag, w, rng),
            Tensor::zeros(&[w]),
        ];
        for _ in 0..k {
            p.push(xavier(&[w, w], k * w, w, rng));
        }
        p.push(Tensor::zeros(&[w]));
        for _ in 0..k {
            p.push(xavier(&[w, h], k * w, h, rng));
        }
        p.push(Tensor::zeros(&[h]));
        let nh = self.n_ul() * h;
        p.push(xavier(&[nh, self.embed], nh, self.embed, rng));
        p.push(Tensor::zeros(&[self.embed]));
        p
    }

    fn init_head(&self, rng: &mut Rng) -> Vec<Tensor> {
        vec![
            xavier(
                &[self.embed, self.head_hidden],
                self.embed,
                self.head_hidden,
                rng,
            ),
            Tensor::zeros(&[self.head_hidden]),
            xavier(
                &[self.head_hidden, self.n_ul()],
                self.head_hidden,
                self.n_ul(),
                rng,
            ),
            Tensor::zeros(&[self.n_ul()]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 0.003,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(format!(
                "train config needs lr > 0, epochs >= 1, batch_size >= 1 (got {}, {}, {})",
                self.lr, self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Named flat parameter arrays, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn to_named(shapes: &[(String, Vec<usize>)], params: &[Tensor]) -> Vec<NamedParam> {
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

fn from_named(shapes: &[(String, Vec<usize>)], named: &[NamedParam]) -> Result<Vec<Tensor>> {
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

/// Graph-temporal network evaluation shared by STL and MTL models.
struct Graph<'a> {
    arch: &'a ForecastArch,
    lap: &'a Tensor,
}

impl Graph<'_> {
    /// Input `[S, n, lag]` to zero-padded `[N*S, lag]`, rows node-major.
    fn pad_input(&self, features: &Tensor) -> Result<Tensor> {
        let a = self.arch;
        let sh = features.shape();
        if sh.len() != 3 || sh[1] != a.n_ul() || sh[2] != a.lag {
            return Err(Error::Shape(format!(
                "features {:?}, expected [samples, {}, {}]",
                sh,
                a.n_ul(),
                a.lag
            )));
        }
        let s = sh[0];
        let mut x = vec![0.0; a.graph_nodes * s * a.lag];
        for b in 0..s {
            for (i, &row) in a.ul_rows.iter().enumerate() {
                let src = &features.data()[(b * a.n_ul() + i) * a.lag..][..a.lag];
                x[(row * s + b) * a.lag..][..a.lag].copy_from_slice(src);
            }
        }
        Tensor::new(vec![a.graph_nodes * s, a.lag], x)
    }

    fn cheb(&self, t: &mut Tape, h: Var, thetas: &[Var], bias: Var, s: usize) -> Var {
        let n = self.arch.graph_nodes;
        let c = t.value(h).cols();
        let lap = t.constant(self.lap.clone());
        let mut zs = vec![h];
        if thetas.len() > 1 {
            let hv = t.reshape(h, &[n, s * c]);
            let z1 = t.matmul(lap, hv);
            zs.push(t.reshape(z1, &[n * s, c]));
            let mut prev2 = hv;
            let mut prev1 = z1;
            for _ in 2..thetas.len() {
                let lz = t.matmul(lap, prev1);
                let lz2 = t.scale(lz, 2.0);
                let zk = t.sub(lz2, prev2);
                zs.push(t.reshape(zk, &[n * s, c]));
                prev2 = prev1;
                prev1 = zk;
            }
        }
        let mut acc = t.matmul(zs[0], thetas[0]);
        for (z, th) in zs.iter().zip(thetas).skip(1) {
            let term = t.matmul(*z, *th);
            acc = t.add(acc, term);
        }
        t.add_row(acc, bias)
    }

    /// Sample embeddings `[S, embed]`.
    fn encode(&self, t: &mut Tape, enc: &[Var], features: &Tensor) -> Result<(Var, usize)> {
        let a = self.arch;
        let s = features.shape()[0];
        let x = t.constant(self.pad_input(features)?);
        let k = a.k_order;
        let h0 = t.matmul(x, enc[0]);
        let h0 = t.add_row(h0, enc[1]);
        let h1 = t.tanh(h0);
        let h2 = self.cheb(t, h1, &enc[2..2 + k], enc[2 + k], s);
        let h2 = t.tanh(h2);
        let h3 = self.cheb(t, h2, &enc[3 + k..3 + 2 * k], enc[3 + 2 * k], s);
        let h3 = t.tanh(h3);
        let wide = t.reshape(h3, &[a.graph_nodes, s * a.hidden]);
        // readout: sum_i U_i R_i with U_i the [S, hidden] block of UL node i
        let (rw, rb) = (enc[4 + 2 * k], enc[5 + 2 * k]);
        let mut acc: Option<Var> = None;
        for (i, &row) in a.ul_rows.iter().enumerate() {
            let u = t.select_rows(wide, &[row]);
            let u = t.reshape(u, &[s, a.hidden]);
            let r: Vec<usize> = (i * a.hidden..(i + 1) * a.hidden).collect();
            let ri = t.select_rows(rw, &r);
            let term = t.matmul(u, ri);
            acc = Some(match acc {
                None => term,
                Some(prev) => t.add(prev, term),
            });
        }
        let z = t.add_row(acc.expect("at least one UL node"), rb);
        Ok((t.tanh(z), s))
    }

    /// Predictions `[S, n]`.
    fn head(&self, t: &mut Tape, head: &[Var], emb: Var) -> Var {
        let z = t.matmul(emb, head[0]);
        let z = t.add_row(z, head[1]);
        let z = t.tanh(z);
        let y = t.matmul(z, head[2]);
        t.add_row(y, head[3])
    }
}

/// `sum_i w_i (pred_i - target_i)^2`.
pub fn weighted_loss(pred: &[f64], target: &[f64], w: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != w.len() {
        return Err(Error::Shape(format!(
            "weighted loss lengths {} / {} / {}",
            pred.len(),
            target.len(),
            w.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .zip(w)
        .map(|((p, y), wi)| wi * (p - y) * (p - y))
        .sum())
}

/// Batch-mean weighted squared error of `pred [S,n]` against `targets [S,n]`.
fn weighted_loss_var(t: &mut Tape, pred: Var, targets: &Tensor, w: &[f64]) -> Var {
    let (s, n) = targets.as_2d();
    let y = t.constant(targets.clone());
    let row: Vec<f64> = w.iter().map(|wi| wi / s as f64).collect();
    let m = t.constant(Tensor::matrix(s, n, row.repeat(s)));
    let d = t.sub(pred, y);
    let d2 = t.square(d);
    let wd = t.mul(m, d2);
    t.sum(wd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub arch: ForecastArch,
    pub scaled_laplacian: Tensor,
    pub encoder: Vec<Tensor>,
    pub head: Vec<Tensor>,
    pub weights: WeightVector,
    pub norm: Vec<crate::scenarios::NormStats>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlModel {
    pub arch: ForecastArch,
    pub scaled_laplacian: Tensor,
    pub shared_encoder: Vec<Tensor>,
    pub heads: Vec<Vec<Tensor>>,
    pub tasks: Vec<WeightVector>,
    pub norm: Vec<crate::scenarios::NormStats>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

fn check_weights(w: &WeightVector, n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Shape(format!(
            "weight vector of length {} for {n} nodes",
            w.len()
        )));
    }
    crate::numerics::check_simplex(w.as_slice())
}

impl ForecastModel {
    pub fn new(
        arch: ForecastArch,
        scaled_laplacian: Tensor,
        w: WeightVector,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_weights(&w, arch.n_ul())?;
        let encoder = arch.init_encoder(&mut rng.fork(1));
        let head = arch.init_head(&mut rng.fork(2));
        Ok(ForecastModel {
            arch,
            scaled_laplacian,
            encoder,
            head,
            weights: w,
            norm: Vec::new(),
            seed: rng.seed(),
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let z = |v: &[Tensor]| v.iter().map(|t| Tensor::zeros(t.shape())).collect();
        ForecastModel {
            encoder: z(&self.encoder),
            head: z(&self.head),
            ..self.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.iter().chain(&self.head).map(Tensor::len).sum()
    }

    fn graph(&self) -> Graph<'_> {
        Graph {
            arch: &self.arch,
            lap: &self.scaled_laplacian,
        }
    }

    /// Loss and flat parameter gradient (encoder then head) for weights `w`.
    pub fn loss_and_grad(&self, batch: &SupervisedBatch, w: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let enc: Vec<Var> = self.encoder.iter().map(|p| t.leaf(p.clone())).collect();
        let head: Vec<Var> = self.head.iter().map(|p| t.leaf(p.clone())).collect();
        let g = self.graph();
        let (emb, _) = g.encode(&mut t, &enc, &batch.features)?;
        let pred = g.head(&mut t, &head, emb);
        let loss = weighted_loss_var(&mut t, pred, &batch.targets, w);
        let grads = t.backward(loss)?;
        let flat = enc.iter().chain(&head).map(|v| grads.wrt(*v)).collect();
        Ok((t.value(loss).item(), flat))
    }

    /// Normalized predictions `[S, n]`.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let enc: Vec<Var> = self.encoder.iter().map(|p| t.constant(p.clone())).collect();
        let head: Vec<Var> = self.head.iter().map(|p| t.constant(p.clone())).collect();
        let g = self.graph();
        let (emb, _) = g.encode(&mut t, &enc, features)?;
        let pred = g.head(&mut t, &head, emb);
        Ok(t.value(pred).clone())
    }

    /// Predictions in load units, one row per sample.
    pub fn predict_denormalized(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        denormalize_rows(&self.predict(features)?, &self.norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: "wpo-forecaster-v1".into(),
            arch: self.arch.clone(),
            scaled_laplacian: self.scaled_laplacian.clone(),
            encoder: to_named(&self.arch.encoder_shapes(), &self.encoder),
            heads: vec![to_named(&self.arch.head_shapes(), &self.head)],
            tasks: vec![self.weights.clone()],
            norm: self.norm.clone(),
            seed: self.seed,
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.heads.len() != 1 || ck.tasks.len() != 1 {
            return Err(Error::InvalidArgument(
                "checkpoint is not a single-task model".into(),
            ));
        }
        Ok(ForecastModel {
            encoder: from_named(&ck.arch.encoder_shapes(), &ck.encoder)?,
            head: from_named(&ck.arch.head_shapes(), &ck.heads[0])?,
            arch: ck.arch,
            scaled_laplacian: ck.scaled_laplacian,
            weights: ck.tasks[0].clone(),
            norm: ck.norm,
            seed: ck.seed,
        })
    }
}

/// JSON checkpoint: architecture, named flat arrays, normalization, seed.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    arch: ForecastArch,
    scaled_laplacian: Tensor,
    encoder: Vec<NamedParam>,
    heads: Vec<Vec<NamedParam>>,
    tasks: Vec<WeightVector>,
    norm: Vec<crate::scenarios::NormStats>,
    seed: u64,
}

fn denormalize_rows(pred: &Tensor, norm: &[crate::scenarios::NormStats]) -> Result<Vec<Vec<f64>>> {
    let (s, n) = pred.as_2d();
    if norm.len() != n {
        return Err(Error::Shape(format!(
            "{} norm entries for {n} outputs",
            norm.len()
        )));
    }
    Ok((0..s)
        .map(|r| {
            pred.row(r)
                .iter()
                .zip(norm)
                .map(|(&z, &st)| crate::scenarios::denormalize(z, st))
                .collect()
        })
        .collect())
}

impl MtlModel {
    pub fn n_params(&self) -> usize {
        self.shared_encoder
            .iter()
            .chain(self.heads.iter().flatten())
            .map(Tensor::len)
            .sum()
    }

    fn graph(&self) -> Graph<'_> {
        Graph {
            arch: &self.arch,
            lap: &self.scaled_laplacian,
        }
    }

    /// Normalized predictions `[S, n]` of every task head.
    pub fn predict_all(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        let mut t = Tape::new();
        let enc: Vec<Var> = self
            .shared_encoder
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect();
        let g = self.graph();
        let (emb, _) = g.encode(&mut t, &enc, features)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let hv: Vec<Var> = h.iter().map(|p| t.constant(p.clone())).collect();
            let pred = g.head(&mut t, &hv, emb);
            out.push(t.value(pred).clone());
        }
        Ok(out)
    }

    pub fn predict_task(&self, task: usize, features: &Tensor) -> Result<Tensor> {
        if task >= self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "task {task} of {}",
                self.heads.len()
            )));
        }
        let mut t = Tape::new();
        let enc: Vec<Var> = self
            .shared_encoder
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect();
        let g = self.graph();
        let (emb, _) = g.encode(&mut t, &enc, features)?;
        let hv: Vec<Var> = self.heads[task]
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect();
        let pred = g.head(&mut t, &hv, emb);
        Ok(t.value(pred).clone())
    }

    pub fn predict_task_denormalized(
        &self,
        task: usize,
        features: &Tensor,
    ) -> Result<Vec<Vec<f64>>> {
        denormalize_rows(&self.predict_task(task, features)?, &self.norm)
    }

    /// Mean of the per-task weighted losses and its flat gradient
    /// (shared encoder, then each head in task order). Task losses are summed
    /// in a canonical order of the weight vectors, so reordering the task
    /// list permutes the heads and leaves every number unchanged.
    pub fn loss_and_grad(&self, batch: &SupervisedBatch) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let enc: Vec<Var> = self
            .shared_encoder
            .iter()
            .map(|p| t.leaf(p.clone()))
            .collect();
        let heads: Vec<Vec<Var>> = self
            .heads
            .iter()
            .map(|h| h.iter().map(|p| t.leaf(p.clone())).collect())
            .collect();
        let g = self.graph();
        let (emb, _) = g.encode(&mut t, &enc, &batch.features)?;
        let mut total: Option<Var> = None;
        for k in canonical_order(&self.tasks) {
            let (hv, w) = (&heads[k], &self.tasks[k]);
            let pred = g.head(&mut t, hv, emb);
            let l = weighted_loss_var(&mut t, pred, &batch.targets, w.as_slice());
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l),
            });
        }
        let loss = t.scale(
            total.expect("at least one task"),
            1.0 / self.tasks.len() as f64,
        );
        let grads = t.backward(loss)?;
        let flat = enc
            .iter()
            .chain(heads.iter().flatten())
            .map(|v| grads.wrt(*v))
            .collect();
        Ok((t.value(loss).item(), flat))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hs = self.arch.head_shapes();
        let ck = Checkpoint {
            format: "wpo-forecaster-v1".into(),
            arch: self.arch.clone(),
            scaled_laplacian: self.scaled_laplacian.clone(),
            encoder: to_named(&self.arch.encoder_shapes(), &self.shared_encoder),
            heads: self.heads.iter().map(|h| to_named(&hs, h)).collect(),
            tasks: self.tasks.clone(),
            norm: self.norm.clone(),
            seed: self.seed,
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let hs = ck.arch.head_shapes();
        Ok(MtlModel {
            shared_encoder: from_named(&ck.arch.encoder_shapes(), &ck.encoder)?,
            heads: ck
                .heads
                .iter()
                .map(|h| from_named(&hs, h))
                .collect::<Result<_>>()?,
            arch: ck.arch,
            scaled_laplacian: ck.scaled_laplacian,
            tasks: ck.tasks,
            norm: ck.norm,
            seed: ck.seed,
        })
    }
}

/// Task indices sorted by the bit patterns of their weights (index breaks ties).
fn canonical_order(tasks: &[WeightVector]) -> Vec<usize> {
    let key = |w: &WeightVector| -> Vec<u64> { w.as_slice().iter().map(|v| v.to_bits()).collect() };
    let mut idx: Vec<usize> = (0..tasks.len()).collect();
    idx.sort_by(|&a, &b| key(&tasks[a]).cmp(&key(&tasks[b])).then(a.cmp(&b)));
    idx
}

/// Trains with minibatches reshuffled each epoch; `step` returns the batch loss
/// and gradients for the current parameters.
fn fit<F>(
    params: &mut Vec<Tensor>,
    batch: &SupervisedBatch,
    cfg: &TrainConfig,
    mut loss_grad: F,
) -> Result<TrainReport>
where
    F: FnMut(&[Tensor], &SupervisedBatch) -> Result<(f64, Vec<Tensor>)>,
{
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(3);
    let mut opt = OptimState::new(cfg.optimizer, params);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mb = batch.select(chunk);
            let (loss, grads) = loss_grad(params, &mb)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            opt.step(params, &grads, cfg.lr);
            if params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
            sum += loss * chunk.len() as f64;
        }
        report.epoch_loss.push(sum / batch.len() as f64);
    }
    Ok(report)
}

fn split_params(params: Vec<Tensor>, at: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut a = params;
    let b = a.split_off(at);
    (a, b)
}

/// Trains a single-task model under weights `w` on the training split.
pub fn train_stl(
    net: &Network,
    ds: &ScenarioDataset,
    w: &WeightVector,
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    let arch = ForecastArch::stl(net, ds.lag)?;
    train_stl_with(arch, net, ds, w, cfg)
}

pub fn train_stl_with(
    arch: ForecastArch,
    net: &Network,
    ds: &ScenarioDataset,
    w: &WeightVector,
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    let lap = graph_spectrum(net)?.scaled_laplacian;
    let mut model = ForecastModel::new(arch, lap, w.clone(), &mut Rng::new(cfg.seed))?;
    model.norm = ds.norm.clone();
    let batch = ds.make_supervised(ds.train.clone())?;
    let n_enc = model.encoder.len();
    let mut params: Vec<Tensor> = model
        .encoder
        .drain(..)
        .chain(model.head.drain(..))
        .collect();
    let shell = model.clone();
    let report = fit(&mut params, &batch, cfg, |p, mb| {
        let (e, h) = split_params(p.to_vec(), n_enc);
        let m = ForecastModel {
            encoder: e,
            head: h,
            ..shell.clone()
        };
        m.loss_and_grad(mb, w.as_slice())
    })?;
    let (e, h) = split_params(params, n_enc);
    model.encoder = e;
    model.head = h;
    Ok((model, report))
}

/// Trains one shared encoder and one head per weight setting on the average
/// of the per-task weighted losses. All heads start from the same draw.
pub fn train_mtl(
    net: &Network,
    ds: &ScenarioDataset,
    tasks: &[WeightVector],
    cfg: &TrainConfig,
) -> Result<(MtlModel, TrainReport)> {
    let arch = ForecastArch::mtl(net, ds.lag)?;
    train_mtl_with(arch, net, ds, tasks, cfg)
}

pub fn train_mtl_with(
    arch: ForecastArch,
    net: &Network,
    ds: &ScenarioDataset,
    tasks: &[WeightVector],
    cfg: &TrainConfig,
) -> Result<(MtlModel, TrainReport)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "multi-task training needs at least one task".into(),
        ));
    }
    for w in tasks {
        check_weights(w, arch.n_ul())?;
    }
    let lap = graph_spectrum(net)?.scaled_laplacian;
    let rng = Rng::new(cfg.seed);
    let shared = arch.init_encoder(&mut rng.fork(1));
    let head0 = arch.init_head(&mut rng.fork(2));
    let mut model = MtlModel {
        arch,
        scaled_laplacian: lap,
        shared_encoder: shared,
        heads: vec![head0; tasks.len()],
        tasks: tasks.to_vec(),
        norm: ds.norm.clone(),
        seed: cfg.seed,
    };
    let batch = ds.make_supervised(ds.train.clone())?;
    let n_enc = model.shared_encoder.len();
    let n_head = model.heads[0].len();
    let mut params: Vec<Tensor> = model
        .shared_encoder
        .drain(..)
        .chain(model.heads.drain(..).flatten())
        .collect();
    let unpack = |p: Vec<Tensor>| -> (Vec<Tensor>, Vec<Vec<Tensor>>) {
        let (e, rest) = split_params(p, n_enc);
        (e, rest.chunks(n_head).map(|c| c.to_vec()).collect())
    };
    let shell = model.clone();
    let report = fit(&mut params, &batch, cfg, |p, mb| {
        let (e, h) = unpack(p.to_vec());
        let m = MtlModel {
            shared_encoder: e,
            heads: h,
            ..shell.clone()
        };
        m.loss_and_grad(mb)
    })?;
    let (e, h) = unpack(params);
    model.shared_encoder = e;
    model.heads = h;
    Ok((model, report))
}

/// Trains a fresh head for `w` on top of the frozen shared encoder of `mtl`.
/// The result is a single-task model using the MTL encoder architecture.
pub fn train_head_on_encoder(
    mtl: &MtlModel,
    ds: &ScenarioDataset,
    w: &WeightVector,
    cfg: &TrainConfig,
) -> Result<(ForecastModel, TrainReport)> {
    check_weights(w, mtl.arch.n_ul())?;
    let batch = ds.make_supervised(ds.train.clone())?;
    let emb = {
        let mut t = Tape::new();
        let enc: Vec<Var> = mtl
            .shared_encoder
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect();
        let (e, _) = mtl.graph().encode(&mut t, &enc, &batch.features)?;
        t.value(e).clone()
    };
    let first = ds.train.start;
    let mut params = mtl.arch.init_head(&mut Rng::new(cfg.seed).fork(2));
    let report = fit(&mut params, &batch, cfg, |p, mb| {
        let rows: Vec<usize> = mb.steps.iter().map(|s| s - first).collect();
        let mut t = Tape::new();
        let e = t.constant(Tensor::matrix(
            rows.len(),
            emb.cols(),
            rows.iter().flat_map(|&r| emb.row(r).to_vec()).collect(),
        ));
        let hv: Vec<Var> = p.iter().map(|q| t.leaf(q.clone())).collect();
        let pred = mtl.graph().head(&mut t, &hv, e);
        let loss = weighted_loss_var(&mut t, pred, &mb.targets, w.as_slice());
        let g = t.backward(loss)?;
        Ok((t.value(loss).item(), hv.iter().map(|v| g.wrt(*v)).collect()))
    })?;
    let model = ForecastModel {
        arch: mtl.arch.clone(),
        scaled_laplacian: mtl.scaled_laplacian.clone(),
        encoder: mtl.shared_encoder.clone(),
        head: params,
        weights: w.clone(),
        norm: mtl.norm.clone(),
        seed: cfg.seed,
    };
    Ok((model, report))
}

/// Verifies `grad L_w = sum_i w_i grad l_i`; returns the max abs deviation.
pub fn gradient_decomposition_check(
    model: &ForecastModel,
    batch: &SupervisedBatch,
    w: &WeightVector,
) -> Result<f64> {
    let n = model.arch.n_ul();
    check_weights(w, n)?;
    let (_, lhs) = model.loss_and_grad(batch, w.as_slice())?;
    let mut rhs: Vec<Tensor> = lhs.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for i in 0..n {
        let (_, gi) = model.loss_and_grad(batch, WeightVector::vertex(n, i).as_slice())?;
        for (acc, g) in rhs.iter_mut().zip(&gi) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += w[i] * b;
            }
        }
    }
    Ok(lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max))
}

/// Per-node mean squared error of normalized predictions `[S, n]`.
pub fn per_node_mse(pred: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    let (s, n) = pred.as_2d();
    let mut out = vec![0.0; n];
    for r in 0..s {
        for (i, (p, y)) in pred.row(r).iter().zip(targets.row(r)).enumerate() {
            out[i] += (p - y) * (p - y);
        }
    }
    Ok(out.into_iter().map(|v| v / s as f64).collect())
}

/// Writes `node,loss` rows.
pub fn write_node_losses(path: &Path, node_ids: &[usize], losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "loss"])?;
    for (id, l) in node_ids.iter().zip(losses) {
        w.write_record([id.to_string(), crate::scenarios::fmt_f64(*l)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub stl_total: usize,
    pub mtl_total: usize,
    pub ratio: f64,
}

/// STL total `|W|(θS + θTS)`, MTL total `θ̃S + |W| θTS`.
pub fn param_counts_from(
    theta_s: usize,
    theta_ts: usize,
    theta_s_shared: usize,
    n_tasks: usize,
) -> Result<ParamCounts> {
    if n_tasks < 1 {
        return Err(Error::InvalidArgument(
            "need at least one weight setting".into(),
        ));
    }
    let stl_total = n_tasks * (theta_s + theta_ts);
    let mtl_total = theta_s_shared + n_tasks * theta_ts;
    Ok(ParamCounts {
        stl_total,
        mtl_total,
        ratio: stl_total as f64 / mtl_total as f64,
    })
}

pub fn param_counts(stl: &ForecastArch, mtl: &ForecastArch, n_tasks: usize) -> Result<ParamCounts> {
    if stl.head_params() != mtl.head_params() {
        return Err(Error::InvalidArgument(
            "STL and MTL heads must share one architecture".into(),
        ));
    }
    param_counts_from(
        stl.encoder_params(),
        stl.head_params(),
        mtl.encoder_params(),
        n_tasks,
    )
}

/// Weighted eval loss of every MTL task head and of each matching STL model.
pub fn mtl_gap(mtl: &MtlModel, stls: &[ForecastModel], eval: &SupervisedBatch) -> Result<f64> {
    if stls.len() != mtl.tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} STL models for {} tasks",
            stls.len(),
            mtl.tasks.len()
        )));
    }
    let preds = mtl.predict_all(&eval.features)?;
    let mut acc = 0.0;
    for (k, (stl, w)) in stls.iter().zip(&mtl.tasks).enumerate() {
        if &stl.weights != w {
            return Err(Error::InvalidArgument(format!(
                "STL model {k} was trained for different weights"
            )));
        }
        let lm = weighted_eval_loss(&preds[k], &eval.targets, w)?;
        let ls = weighted_eval_loss(&stl.predict(&eval.features)?, &eval.targets, w)?;
        acc += (lm - ls).abs();
    }
    Ok(acc / stls.len() as f64)
}

/// `sum_i w_i mse_i` over a batch.
pub fn weighted_eval_loss(pred: &Tensor, targets: &Tensor, w: &WeightVector) -> Result<f64> {
    let mse = per_node_mse(pred, targets)?;
    if mse.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} nodes, {} weights",
            mse.len(),
            w.len()
        )));
    }
    Ok(mse.iter().zip(w.as_slice()).map(|(m, wi)| m * wi).sum())
}
