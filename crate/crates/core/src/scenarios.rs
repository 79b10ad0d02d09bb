//! Seeded synthetic uncertain-load traces and supervised windows.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Network, IEEE33_BRANCH1_UL, IEEE33_BRANCH2_UL};
use crate::numerics::linalg::cholesky;
use crate::numerics::{Rng, Tensor};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Uniform base load on every uncertain-load node.
    Case1,
    /// Branch-1 nodes scaled by 0.5, branch-2 nodes by 1.6.
    Case2,
    /// Per-node multipliers in uncertain-load order.
    Custom(Vec<f64>),
}

impl Case {
    pub fn multipliers(&self, net: &Network) -> Result<Vec<f64>> {
        match self {
            Case::Case1 => Ok(vec![1.0; net.n_ul()]),
            Case::Case2 => Ok(net
                .ul_nodes
                .iter()
                .map(|id| {
                    if IEEE33_BRANCH1_UL.contains(id) {
                        0.5
                    } else if IEEE33_BRANCH2_UL.contains(id) {
                        1.6
                    } else {
                        1.0
                    }
                })
                .collect()),
            Case::Custom(m) => {
                if m.len() != net.n_ul() {
                    return Err(Error::InvalidArgument(format!(
                        "custom case has {} multipliers for {} uncertain-load nodes",
                        m.len(),
                        net.n_ul()
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub days: usize,
    pub steps_per_day: usize,
    pub lag: usize,
    /// AR(1) coefficient of the multiplicative noise.
    pub rho: f64,
    /// Innovation scale of the noise.
    pub sigma: f64,
    /// Hop length scale of the spatial innovation kernel.
    pub lambda_s: f64,
    /// Base uncertain load per node in p.u.
    pub base: f64,
    pub daily_amplitude: f64,
    pub weekend_factor: f64,
    pub train_fraction: f64,
    pub case: Case,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            days: 60,
            steps_per_day: 96,
            lag: 8,
            rho: 0.7,
            sigma: 0.15,
            lambda_s: 3.0,
            base: 0.006,
            daily_amplitude: 0.3,
            weekend_factor: 0.85,
            train_fraction: 0.8,
            case: Case::Case1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.days < 2 {
            return bad("days must be >= 2");
        }
        if self.lag < 1 {
            return bad("lag must be >= 1");
        }
        if self.steps_per_day < 1 {
            return bad("steps_per_day must be >= 1");
        }
        if !(self.rho.abs() < 1.0) {
            return bad("rho must lie in (-1, 1)");
        }
        if !(self.sigma >= 0.0) || !(self.lambda_s > 0.0) || !(self.base >= 0.0) {
            return bad("sigma, base must be >= 0 and lambda_s > 0");
        }
        if !(self.daily_amplitude >= 0.0 && self.daily_amplitude < 1.0) {
            return bad("daily_amplitude must lie in [0, 1)");
        }
        if !(self.weekend_factor > 0.0) {
            return bad("weekend_factor must be > 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        let n = self.days * self.steps_per_day;
        let cut = (self.train_fraction * n as f64).floor() as usize;
        if cut <= self.lag || cut >= n {
            return bad("split leaves no training or evaluation samples");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

pub fn normalize(v: f64, s: NormStats) -> f64 {
    (v - s.mean) / s.std
}

pub fn denormalize(z: f64, s: NormStats) -> f64 {
    z * s.std + s.mean
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadTrace {
    pub node: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDataset {
    pub node_ids: Vec<usize>,
    /// `values[t][i]`: load of node `i` at step `t`, p.u.
    pub values: Vec<Vec<f64>>,
    pub lag: usize,
    pub train: Range<usize>,
    pub eval: Range<usize>,
    pub norm: Vec<NormStats>,
    pub seed: u64,
    pub config: GeneratorConfig,
}

/// Daily profile multiplier of node `i` of `n` at step `t`.
pub fn daily_shape(cfg: &GeneratorConfig, i: usize, n: usize, t: usize) -> f64 {
    let phase = -0.5 * PI + PI * i as f64 / n.max(1) as f64 * 0.5;
    let tod = (t % cfg.steps_per_day) as f64 / cfg.steps_per_day as f64;
    let day = t / cfg.steps_per_day;
    let wf = if day % 7 >= 5 {
        cfg.weekend_factor
    } else {
        1.0
    };
    (1.0 + cfg.daily_amplitude * (2.0 * PI * tod + phase).sin()) * wf
}

pub fn generate_scenarios(
    net: &Network,
    cfg: &GeneratorConfig,
    rng: &mut Rng,
) -> Result<ScenarioDataset> {
    cfg.validate()?;
    let n = net.n_ul();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "network has no uncertain-load nodes".into(),
        ));
    }
    let mult = cfg.case.multipliers(net)?;
    let hops = net.hop_distances()?;
    let ul = net.ul_indices()?;
    let kernel = Tensor::matrix(
        n,
        n,
        (0..n * n)
            .map(|k| (-(hops[ul[k / n]][ul[k % n]] as f64) / cfg.lambda_s).exp())
            .collect(),
    );
    let chol = cholesky(&kernel)?;
    let steps = cfg.days * cfg.steps_per_day;
    let stat_sd = 1.0 / (1.0 - cfg.rho * cfg.rho).sqrt();
    let mixed = |rng: &mut Rng| -> Vec<f64> {
        let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        (0..n)
            .map(|i| (0..=i).map(|k| chol.get(i, k) * z[k]).sum())
            .collect()
    };
    let mut e: Vec<f64> = mixed(rng).iter().map(|x| cfg.sigma * stat_sd * x).collect();
    let mut values = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            let eps = mixed(rng);
            for i in 0..n {
                e[i] = cfg.rho * e[i] + cfg.sigma * eps[i];
            }
        }
        values.push(
            (0..n)
                .map(|i| (cfg.base * mult[i] * daily_shape(cfg, i, n, t) * (1.0 + e[i])).max(0.0))
                .collect(),
        );
    }
    let cut = (cfg.train_fraction * steps as f64).floor() as usize;
    let norm = norm_stats(&values, 0..cut, n);
    Ok(ScenarioDataset {
        node_ids: net.ul_nodes.clone(),
        values,
        lag: cfg.lag,
        train: cfg.lag..cut,
        eval: cut..steps,
        norm,
        seed: rng.seed(),
        config: cfg.clone(),
    })
}

fn norm_stats(values: &[Vec<f64>], range: Range<usize>, n: usize) -> Vec<NormStats> {
    let len = range.len() as f64;
    (0..n)
        .map(|i| {
            let mean = values[range.clone()].iter().map(|r| r[i]).sum::<f64>() / len;
            let var = values[range.clone()]
                .iter()
                .map(|r| (r[i] - mean).powi(2))
                .sum::<f64>()
                / len;
            NormStats {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            }
        })
        .collect()
}

/// Lag windows and next-step targets, normalized per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedBatch {
    /// Shape `[samples, n, lag]`.
    pub features: Tensor,
    /// Shape `[samples, n]`.
    pub targets: Tensor,
    /// Time step of each target.
    pub steps: Vec<usize>,
}

impl SupervisedBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.targets.cols()
    }

    pub fn lag(&self) -> usize {
        *self.features.shape().last().unwrap()
    }

    /// Sub-batch with the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> SupervisedBatch {
        let (n, lag) = (self.n_nodes(), self.lag());
        let mut f = Vec::with_capacity(idx.len() * n * lag);
        let mut y = Vec::with_capacity(idx.len() * n);
        for &s in idx {
            f.extend_from_slice(&self.features.data()[s * n * lag..(s + 1) * n * lag]);
            y.extend_from_slice(self.targets.row(s));
        }
        SupervisedBatch {
            features: Tensor::new(vec![idx.len(), n, lag], f).expect("selected features"),
            targets: Tensor::matrix(idx.len(), n, y),
            steps: idx.iter().map(|&s| self.steps[s]).collect(),
        }
    }
}

impl ScenarioDataset {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trace(&self, i: usize) -> LoadTrace {
        LoadTrace {
            node: self.node_ids[i],
            values: self.values.iter().map(|r| r[i]).collect(),
        }
    }

    pub fn make_supervised(&self, range: Range<usize>) -> Result<SupervisedBatch> {
        if range.start < self.lag {
            return Err(Error::InvalidArgument(format!(
                "range starts at {} inside the first {} (lag) steps",
                range.start, self.lag
            )));
        }
        if range.end > self.values.len() || range.start > range.end {
            return Err(Error::InvalidArgument(format!(
                "range {range:?} outside dataset of {} steps",
                self.values.len()
            )));
        }
        let (n, lag) = (self.n_nodes(), self.lag);
        let mut f = Vec::with_capacity(range.len() * n * lag);
        let mut y = Vec::with_capacity(range.len() * n);
        for t in range.clone() {
            for i in 0..n {
                for s in t - lag..t {
                    f.push(normalize(self.values[s][i], self.norm[i]));
                }
            }
            for i in 0..n {
                y.push(normalize(self.values[t][i], self.norm[i]));
            }
        }
        Ok(SupervisedBatch {
            features: Tensor::new(vec![range.len(), n, lag], f)?,
            targets: Tensor::new(vec![range.len(), n], y)?,
            steps: range.collect(),
        })
    }

    /// Raw-unit targets for the given steps.
    pub fn truths(&self, steps: &[usize]) -> Vec<Vec<f64>> {
        steps.iter().map(|&t| self.values[t].clone()).collect()
    }

    pub fn denormalize_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.norm)
            .map(|(&v, &s)| denormalize(v, s))
            .collect()
    }

    /// Writes `<stem>.csv` (one column per node) and `<stem>.json` (metadata).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record(self.node_ids.iter().map(|id| id.to_string()))?;
        for row in &self.values {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
        let meta = DatasetSidecar {
            lag: self.lag,
            train: self.train.clone(),
            eval: self.eval.clone(),
            norm: self.norm.clone(),
            seed: self.seed,
            config: self.config.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<ScenarioDataset> {
        let meta: DatasetSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join(format!("{stem}.csv")))?;
        let node_ids = r
            .headers()?
            .iter()
            .map(|h| h.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("dataset header: {e}")))?;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    Error::InvalidArgument(format!("dataset row {}: {e}", values.len()))
                })?;
            values.push(row);
        }
        Ok(ScenarioDataset {
            node_ids,
            values,
            lag: meta.lag,
            train: meta.train,
            eval: meta.eval,
            norm: meta.norm,
            seed: meta.seed,
            config: meta.config,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    lag: usize,
    train: Range<usize>,
    eval: Range<usize>,
    norm: Vec<NormStats>,
    seed: u64,
    config: GeneratorConfig,
}

/// Twelve significant digits, scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.11e}")
}
