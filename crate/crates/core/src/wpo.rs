//! Weighted predict-and-optimize loop: sample weight settings, train them
//! jointly, score each head by PDPL, fit the surrogate, descend on it, and
//! verify the result with a forecaster retrained at the chosen weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dispatch::{pdpl, Evaluator, OracleCache, PdplReport};
use crate::error::{Error, Result};
use crate::forecaster::{
    per_node_mse, train_head_on_encoder, train_mtl, train_stl, MtlModel, TrainConfig,
};
use crate::grid::Network;
use crate::numerics::rng::derive_seed;
use crate::numerics::{
    check_simplex, project_simplex, sample_dirichlet, Rng, Tensor, WeightVector,
};
use crate::scenarios::{fmt_f64, NormStats, ScenarioDataset, SupervisedBatch};
use crate::surrogate::{train_surrogate, SurrogateSample, SurrogateTrainConfig, WeightObjective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    /// Initial step alpha.
    pub step: f64,
    pub max_iter: usize,
    /// Stop once an accepted step moves no entry by more than this.
    pub tol: f64,
    /// Random Dirichlet starts in addition to the uniform start.
    pub restarts: usize,
    /// Accepted steps before the step size returns to `step`.
    pub restore_after: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            step: 0.25,
            max_iter: 50,
            tol: 1e-6,
            restarts: 5,
            restore_after: 3,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.tol > 0.0) || self.max_iter < 1 || self.restore_after < 1 {
            return Err(Error::InvalidArgument(format!(
                "descent needs step > 0, tol > 0, max_iter >= 1, restore_after >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpoConfig {
    /// |W|, including the uniform setting when `include_uniform` is set.
    pub n_weight_settings: usize,
    pub dirichlet_alpha: f64,
    pub include_uniform: bool,
    /// Extra settings drawn at `sparse_alpha` so that D^S covers
    /// concentrated weights, where the surrogate otherwise extrapolates.
    pub sparse_settings: usize,
    pub sparse_alpha: f64,
    /// Joint training of all weight settings.
    pub mtl: TrainConfig,
    /// Retraining at the optimized and uniform weights.
    pub stl: TrainConfig,
    /// Eval-split samples scored per head while building D^S (0 = all).
    pub eval_samples: usize,
    /// Eval-split samples for the final retrained comparison (0 = all).
    pub report_eval_samples: usize,
    /// Retrained models averaged per reported PDPL; every method sees the
    /// same training seeds.
    pub retrains: usize,
    pub surrogate: SurrogateTrainConfig,
    pub descent: DescentConfig,
    pub seed: u64,
    /// Worker threads for PDPL scoring and multi-start descent.
    pub jobs: usize,
}

impl Default for WpoConfig {
    fn default() -> Self {
        WpoConfig {
            n_weight_settings: 200,
            dirichlet_alpha: 1.0,
            include_uniform: true,
            sparse_settings: 0,
            sparse_alpha: 0.3,
            mtl: TrainConfig::default(),
            stl: TrainConfig::default(),
            eval_samples: 96,
            report_eval_samples: 0,
            retrains: 1,
            surrogate: SurrogateTrainConfig {
                epochs: 1000,
                ..SurrogateTrainConfig::default()
            },
            descent: DescentConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl WpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_weight_settings < 10 {
            return Err(Error::InvalidArgument(format!(
                "n_weight_settings must be >= 10, got {}",
                self.n_weight_settings
            )));
        }
        if !(self.dirichlet_alpha > 0.0) || !(self.sparse_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Dirichlet concentrations must be > 0, got {} and {}",
                self.dirichlet_alpha, self.sparse_alpha
            )));
        }
        if self.jobs < 1 || self.retrains < 1 {
            return Err(Error::InvalidArgument(
                "jobs and retrains must be >= 1".into(),
            ));
        }
        self.mtl.validate()?;
        self.stl.validate()?;
        self.surrogate.validate()?;
        self.descent.validate()
    }

    /// Derives every stage seed from one master seed.
    pub fn seeded(mut self, master: u64) -> Self {
        self.seed = master;
        self.mtl.seed = derive_seed(master, 1);
        self.stl.seed = derive_seed(master, 2);
        self.surrogate.seed = derive_seed(master, 3);
        self
    }
}

/// `k` evenly strided eval-split samples (all when `k` is 0 or too large).
pub fn eval_batch(ds: &ScenarioDataset, k: usize) -> Result<SupervisedBatch> {
    let all = ds.make_supervised(ds.eval.clone())?;
    if k == 0 || k >= all.len() {
        return Ok(all);
    }
    let idx: Vec<usize> = (0..k).map(|j| j * all.len() / k).collect();
    Ok(all.select(&idx))
}

/// Eval samples with cached perfect-information costs.
pub struct PdplContext<'a> {
    pub ev: Evaluator<'a>,
    pub batch: SupervisedBatch,
    pub truths: Vec<Vec<f64>>,
    pub oracle: OracleCache,
}

impl<'a> PdplContext<'a> {
    pub fn new(net: &'a Network, ds: &ScenarioDataset, max_samples: usize) -> Result<Self> {
        let ev = Evaluator::new(net)?;
        let batch = eval_batch(ds, max_samples)?;
        let truths = ds.truths(&batch.steps);
        let oracle = OracleCache::build(&ev, &truths)?;
        Ok(PdplContext {
            ev,
            batch,
            truths,
            oracle,
        })
    }

    /// PDPL of normalized predictions `[S, n]`; loads are clamped at zero.
    pub fn score(&self, pred: &Tensor, norm: &[NormStats]) -> Result<PdplReport> {
        let (s, n) = pred.as_2d();
        if s != self.truths.len() || norm.len() != n {
            return Err(Error::Shape(format!(
                "{s}x{n} predictions for {} samples",
                self.truths.len()
            )));
        }
        let loads: Vec<Vec<f64>> = (0..s)
            .map(|r| {
                pred.row(r)
                    .iter()
                    .zip(norm)
                    .map(|(&z, &st)| crate::scenarios::denormalize(z, st).max(0.0))
                    .collect()
            })
            .collect();
        pdpl(
            &self.ev,
            &loads,
            &self.truths,
            &self.batch.steps,
            &self.oracle,
        )
    }

    /// Mean normalized squared error over nodes and samples.
    pub fn mse(&self, pred: &Tensor) -> Result<f64> {
        let m = per_node_mse(pred, &self.batch.targets)?;
        Ok(m.iter().sum::<f64>() / m.len() as f64)
    }
}

/// Ordered parallel map over at most `jobs` scoped threads.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, x)| f(c * chunk + j, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// `count` weight settings: uniform first when requested, then Dirichlet draws.
pub fn draw_weight_settings(
    n: usize,
    count: usize,
    alpha: f64,
    include_uniform: bool,
    rng: &mut Rng,
) -> Result<Vec<WeightVector>> {
    let mut out = Vec::with_capacity(count);
    if include_uniform && count > 0 {
        out.push(WeightVector::uniform(n));
    }
    while out.len() < count {
        out.push(sample_dirichlet(alpha, n, rng)?);
    }
    Ok(out)
}

/// The weight settings of one run: the main design then the sparse extras.
pub fn design_weight_settings(
    n: usize,
    cfg: &WpoConfig,
    rng: &mut Rng,
) -> Result<Vec<WeightVector>> {
    let mut tasks = draw_weight_settings(
        n,
        cfg.n_weight_settings,
        cfg.dirichlet_alpha,
        cfg.include_uniform,
        rng,
    )?;
    tasks.extend(draw_weight_settings(
        n,
        cfg.sparse_settings,
        cfg.sparse_alpha,
        false,
        rng,
    )?);
    Ok(tasks)
}

/// PDPL of MTL head `task` on the context samples.
pub fn mtl_task_pdpl(mtl: &MtlModel, task: usize, ctx: &PdplContext) -> Result<f64> {
    Ok(ctx
        .score(&mtl.predict_task(task, &ctx.batch.features)?, &mtl.norm)?
        .pdpl)
}

/// Trains one MTL model over `tasks` and scores every head.
pub fn surrogate_samples_for_tasks(
    net: &Network,
    ds: &ScenarioDataset,
    tasks: &[WeightVector],
    cfg: &WpoConfig,
) -> Result<(Vec<SurrogateSample>, MtlModel)> {
    let (mtl, _) = train_mtl(net, ds, tasks, &cfg.mtl)?;
    let ctx = PdplContext::new(net, ds, cfg.eval_samples)?;
    let preds = mtl.predict_all(&ctx.batch.features)?;
    let scored = par_map(&preds, cfg.jobs, |k, p| {
        ctx.score(p, &mtl.norm)
            .map(|r| r.pdpl)
            .map_err(|e| Error::InvalidArgument(format!("weight setting {k}: {e}")))
    });
    let samples = tasks
        .iter()
        .zip(scored)
        .map(|(w, p)| {
            Ok(SurrogateSample {
                w: w.clone(),
                pdpl: p?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, mtl))
}

/// D^S: Dirichlet weight settings, jointly trained, each scored by PDPL.
pub fn build_surrogate_dataset(
    net: &Network,
    ds: &ScenarioDataset,
    cfg: &WpoConfig,
    rng: &mut Rng,
) -> Result<Vec<SurrogateSample>> {
    cfg.validate()?;
    let tasks = design_weight_settings(net.n_ul(), cfg, rng)?;
    Ok(surrogate_samples_for_tasks(net, ds, &tasks, cfg)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub w: WeightVector,
    pub phi: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub w0: WeightVector,
    pub phi0: f64,
    pub w_star: WeightVector,
    pub phi_star: f64,
    /// Accepted iterates only; at most `max_iter` entries.
    pub trajectory: Vec<TrajectoryPoint>,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 50;

/// Projected gradient descent on the simplex with backtracking: a step that
/// raises the objective is retried at half the step size.
pub fn optimize_weights<O: WeightObjective + ?Sized>(
    obj: &O,
    w0: &WeightVector,
    cfg: &DescentConfig,
) -> Result<DescentReport> {
    cfg.validate()?;
    check_simplex(w0.as_slice())?;
    let mut w = w0.clone();
    let mut phi = obj.value(w.as_slice())?;
    let phi0 = phi;
    let mut alpha = cfg.step;
    let mut streak = 0;
    let mut trajectory = Vec::new();
    let mut converged = false;
    'outer: for iter in 1..=cfg.max_iter {
        let g = obj.grad(w.as_slice())?;
        for _ in 0..MAX_HALVINGS {
            let moved: Vec<f64> = w
                .as_slice()
                .iter()
                .zip(&g)
                .map(|(wi, gi)| wi - alpha * gi)
                .collect();
            let cand = project_simplex(&moved)?;
            let phi_c = obj.value(cand.as_slice())?;
            if phi_c <= phi {
                let step = cand
                    .as_slice()
                    .iter()
                    .zip(w.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                w = cand;
                phi = phi_c;
                trajectory.push(TrajectoryPoint {
                    iter,
                    w: w.clone(),
                    phi,
                    step,
                });
                streak += 1;
                if streak >= cfg.restore_after {
                    alpha = cfg.step;
                    streak = 0;
                }
                if step <= cfg.tol {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            alpha *= 0.5;
            streak = 0;
        }
        // no step size decreases the objective: stationary point
        converged = true;
        break;
    }
    Ok(DescentReport {
        w0: w0.clone(),
        phi0,
        w_star: w,
        phi_star: phi,
        trajectory,
        converged,
    })
}

/// Descent from uniform plus `cfg.restarts` Dirichlet starts; keeps the lowest
/// final objective (earlier start wins ties).
pub fn optimize_weights_multistart<O: WeightObjective + Sync + ?Sized>(
    obj: &O,
    n: usize,
    cfg: &DescentConfig,
    alpha: f64,
    rng: &mut Rng,
    jobs: usize,
) -> Result<(DescentReport, usize)> {
    let mut starts = vec![WeightVector::uniform(n)];
    for _ in 0..cfg.restarts {
        starts.push(sample_dirichlet(alpha, n, rng)?);
    }
    let runs = par_map(&starts, jobs, |_, w0| optimize_weights(obj, w0, cfg));
    let mut best: Option<(DescentReport, usize)> = None;
    for (k, r) in runs.into_iter().enumerate() {
        let r = r?;
        if best.as_ref().map_or(true, |(b, _)| r.phi_star < b.phi_star) {
            best = Some((r, k));
        }
    }
    Ok(best.expect("at least the uniform start"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    pub pdpl: f64,
    pub mse: f64,
    pub w: WeightVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpoReport {
    pub seed: u64,
    pub w_star: WeightVector,
    /// Surrogate prediction at `w_star`, PDPL units.
    pub phi_star: f64,
    pub descent: DescentReport,
    /// Which start produced `w_star` (0 = uniform).
    pub best_start: usize,
    pub n_samples: usize,
    pub surrogate_train_mse: f64,
    pub surrogate_test_mse: f64,
    /// Measured PDPL of a single-task model retrained at `w_star`.
    pub pdpl_star: f64,
    /// Measured PDPL of a head trained at `w_star` on the frozen MTL encoder.
    pub pdpl_star_mtl: f64,
    pub pdpl_uniform: f64,
    pub mse_star: f64,
    pub mse_uniform: f64,
    pub comparison: Vec<ComparisonRow>,
}

/// Retrains single-task models at `w` and returns mean (PDPL, MSE). With
/// `retrains > 1` the training seeds are derived from `cfg.seed`.
pub fn evaluate_weights(
    net: &Network,
    ds: &ScenarioDataset,
    w: &WeightVector,
    cfg: &TrainConfig,
    ctx: &PdplContext,
    retrains: usize,
) -> Result<(f64, f64)> {
    let (mut p, mut q) = (0.0, 0.0);
    for r in 0..retrains.max(1) {
        let mut c = cfg.clone();
        if retrains > 1 {
            c.seed = derive_seed(cfg.seed, r as u64);
        }
        let (m, _) = train_stl(net, ds, w, &c)?;
        let pred = m.predict(&ctx.batch.features)?;
        p += ctx.score(&pred, &m.norm)?.pdpl;
        q += ctx.mse(&pred)?;
    }
    let k = retrains.max(1) as f64;
    Ok((p / k, q / k))
}

/// Algorithm steps in order (D^S, surrogate, descent), then retrained checks.
pub fn run_wpo(net: &Network, ds: &ScenarioDataset, cfg: &WpoConfig) -> Result<WpoReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let n = net.n_ul();
    let master = Rng::new(cfg.seed);
    let tasks =
        design_weight_settings(n, cfg, &mut master.fork(11)).map_err(|e| e.in_stage("dataset"))?;
    let (samples, mtl) =
        surrogate_samples_for_tasks(net, ds, &tasks, cfg).map_err(|e| e.in_stage("dataset"))?;
    let fit =
        train_surrogate(net, &samples, &cfg.surrogate).map_err(|e| e.in_stage("surrogate"))?;
    let model = fit.model;
    let (descent, best_start) = optimize_weights_multistart(
        &model,
        n,
        &cfg.descent,
        cfg.dirichlet_alpha,
        &mut master.fork(12),
        cfg.jobs,
    )
    .map_err(|e| e.in_stage("descent"))?;
    let w_star = descent.w_star.clone();
    let phi_star = model.scale.denormalize(descent.phi_star);

    let ctx =
        PdplContext::new(net, ds, cfg.report_eval_samples).map_err(|e| e.in_stage("retrain"))?;
    let uniform = WeightVector::uniform(n);
    let (pdpl_star, mse_star) = evaluate_weights(net, ds, &w_star, &cfg.stl, &ctx, cfg.retrains)
        .map_err(|e| e.in_stage("retrain"))?;
    let (pdpl_uniform, mse_uniform) =
        evaluate_weights(net, ds, &uniform, &cfg.stl, &ctx, cfg.retrains)
            .map_err(|e| e.in_stage("retrain"))?;
    let (head, _) =
        train_head_on_encoder(&mtl, ds, &w_star, &cfg.stl).map_err(|e| e.in_stage("retrain"))?;
    let pdpl_star_mtl = head
        .predict(&ctx.batch.features)
        .and_then(|p| ctx.score(&p, &head.norm))
        .map_err(|e| e.in_stage("retrain"))?
        .pdpl;
    let comparison = vec![
        ComparisonRow {
            method: "uniform".into(),
            seed: cfg.seed,
            pdpl: pdpl_uniform,
            mse: mse_uniform,
            w: uniform,
        },
        ComparisonRow {
            method: "wpo".into(),
            seed: cfg.seed,
            pdpl: pdpl_star,
            mse: mse_star,
            w: w_star.clone(),
        },
    ];
    Ok(WpoReport {
        seed: cfg.seed,
        w_star,
        phi_star,
        descent,
        best_start,
        n_samples: samples.len(),
        surrogate_train_mse: fit.train_mse,
        surrogate_test_mse: fit.test_mse,
        pdpl_star,
        pdpl_star_mtl,
        pdpl_uniform,
        mse_star,
        mse_uniform,
        comparison,
    })
}

/// Writes `iter,phi,step,w_<id>...` rows; row 0 is the start point.
pub fn write_trajectory_csv(path: &Path, node_ids: &[usize], d: &DescentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "phi".into(), "step".into()];
    header.extend(node_ids.iter().map(|id| format!("w_{id}")));
    w.write_record(&header)?;
    let start = TrajectoryPoint {
        iter: 0,
        w: d.w0.clone(),
        phi: d.phi0,
        step: 0.0,
    };
    for p in std::iter::once(&start).chain(&d.trajectory) {
        let mut row = vec![p.iter.to_string(), fmt_f64(p.phi), fmt_f64(p.step)];
        row.extend(p.w.as_slice().iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `label,<node ids...>,pdpl` rows; readable by `read_samples_csv`.
pub fn write_weights_csv(
    path: &Path,
    node_ids: &[usize],
    rows: &[(String, WeightVector, f64)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend(node_ids.iter().map(|id| id.to_string()));
    header.push("pdpl".into());
    w.write_record(&header)?;
    for (label, wv, p) in rows {
        let mut row = vec![label.clone()];
        row.extend(wv.as_slice().iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(*p));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Total weight on the given node ids.
pub fn mass_on(net: &Network, w: &WeightVector, ids: &[usize]) -> f64 {
    net.ul_nodes
        .iter()
        .zip(w.as_slice())
        .filter(|(id, _)| ids.contains(id))
        .map(|(_, v)| v)
        .sum()
}
