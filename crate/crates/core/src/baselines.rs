//! Reference weight settings: uniform, voltage margin, feeder end, and a
//! particle swarm searching measured PDPL directly.

use serde::{Deserialize, Serialize};

use crate::dispatch::power_flow;
use crate::error::{Error, Result};
use crate::forecaster::train_mtl;
use crate::grid::{Network, IEEE33_FEEDER_END};
use crate::numerics::{project_simplex, sample_dirichlet, Rng, WeightVector};
use crate::scenarios::ScenarioDataset;
use crate::wpo::{par_map, PdplContext, WpoConfig};

pub fn weights_uniform(net: &Network) -> WeightVector {
    WeightVector::uniform(net.n_ul())
}

/// Normalized inverse margins.
pub fn margins_to_weights(margins: &[f64]) -> Result<WeightVector> {
    if margins.is_empty() {
        return Err(Error::InvalidArgument("no margins".into()));
    }
    if let Some(m) = margins.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "voltage margin {m} is not positive"
        )));
    }
    let inv: Vec<f64> = margins.iter().map(|m| 1.0 / m).collect();
    let total: f64 = inv.iter().sum();
    WeightVector::new(inv.into_iter().map(|x| x / total).collect())
}

/// `V_i - v_min` at each UL node from a power flow with no DG and no UL.
pub fn voltage_margins(net: &Network) -> Result<Vec<f64>> {
    let pf = power_flow(net, &vec![0.0; net.n_ul()], &vec![0.0; net.dg_nodes.len()])?;
    if !pf.converged {
        return Err(Error::Contract(
            "baseline power flow did not converge".into(),
        ));
    }
    net.ul_nodes
        .iter()
        .map(|&id| Ok(pf.v[net.bus_index(id)?] - net.v_min))
        .collect()
}

/// Weights proportional to the inverse voltage margin. Pass the network with
/// its unscaled fixed loads (for the 33-bus feeder, `ieee33_original`).
pub fn weights_margin(net: &Network) -> Result<WeightVector> {
    margins_to_weights(&voltage_margins(net)?)
}

/// `high` on each listed node, `low` elsewhere; must sum to one.
pub fn weights_feeder_end(
    net: &Network,
    nodes: &[usize],
    high: f64,
    low: f64,
) -> Result<WeightVector> {
    if let Some(id) = nodes.iter().find(|id| !net.ul_nodes.contains(id)) {
        return Err(Error::InvalidArgument(format!(
            "feeder-end node {id} is not an uncertain-load node"
        )));
    }
    let w: Vec<f64> = net
        .ul_nodes
        .iter()
        .map(|id| if nodes.contains(id) { high } else { low })
        .collect();
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "feeder-end weights sum to {total}, not 1"
        )));
    }
    WeightVector::new(w)
}

/// Feeder-end weights for the 33-bus feeder: 0.15 on 16, 18, 31, 33, 0.05 elsewhere.
pub fn weights_feeder_end_ieee33(net: &Network) -> Result<WeightVector> {
    weights_feeder_end(net, &IEEE33_FEEDER_END, 0.15, 0.05)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            particles: 8,
            iterations: 10,
            inertia: 0.7,
            cognitive: 1.5,
            social: 1.5,
            dirichlet_alpha: 1.0,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 1 || self.iterations < 1 {
            return Err(Error::InvalidArgument(
                "PSO needs at least one particle and one iteration".into(),
            ));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet_alpha must be > 0, got {}",
                self.dirichlet_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoReport {
    pub w_best: WeightVector,
    pub fitness_best: f64,
    /// Global-best fitness after each iteration.
    pub history: Vec<f64>,
}

/// Global-best PSO on the simplex. `fitness` scores the whole swarm at once.
/// Iteration 1 scores the initial positions; later iterations move first.
pub fn weights_pso<F>(n: usize, cfg: &PsoConfig, mut fitness: F) -> Result<PsoReport>
where
    F: FnMut(&[WeightVector]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut x: Vec<WeightVector> = Vec::with_capacity(cfg.particles);
    for _ in 0..cfg.particles {
        x.push(sample_dirichlet(cfg.dirichlet_alpha, n, &mut rng)?);
    }
    let mut v = vec![vec![0.0; n]; cfg.particles];
    let mut pbest = x.clone();
    let mut pbest_f = vec![f64::INFINITY; cfg.particles];
    let mut gbest = x[0].clone();
    let mut gbest_f = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it > 0 {
            for (p, xp) in x.iter_mut().enumerate() {
                let mut moved = vec![0.0; n];
                for d in 0..n {
                    let r1 = rng.uniform();
                    let r2 = rng.uniform();
                    v[p][d] = cfg.inertia * v[p][d]
                        + cfg.cognitive * r1 * (pbest[p][d] - xp[d])
                        + cfg.social * r2 * (gbest[d] - xp[d]);
                    moved[d] = xp[d] + v[p][d];
                }
                *xp = project_simplex(&moved)?;
            }
        }
        let f = fitness(&x)?;
        if f.len() != x.len() {
            return Err(Error::Shape(format!(
                "{} fitness values for {} particles",
                f.len(),
                x.len()
            )));
        }
        for (p, &fp) in f.iter().enumerate() {
            if !fp.is_finite() {
                return Err(Error::NonFinite(format!("fitness of particle {p}")));
            }
            if fp < pbest_f[p] {
                pbest_f[p] = fp;
                pbest[p] = x[p].clone();
            }
            if fp < gbest_f {
                gbest_f = fp;
                gbest = x[p].clone();
            }
        }
        history.push(gbest_f);
    }
    Ok(PsoReport {
        w_best: gbest,
        fitness_best: gbest_f,
        history,
    })
}

/// Swarm fitness: one MTL model trained with the swarm as its task set, each
/// head scored by PDPL on the eval subsample.
pub fn mtl_pdpl_fitness<'a>(
    net: &'a Network,
    ds: &'a ScenarioDataset,
    cfg: &'a WpoConfig,
) -> Result<impl FnMut(&[WeightVector]) -> Result<Vec<f64>> + 'a> {
    let ctx = PdplContext::new(net, ds, cfg.eval_samples)?;
    let mut round = 0u64;
    Ok(move |swarm: &[WeightVector]| {
        let mut mtl_cfg = cfg.mtl.clone();
        mtl_cfg.seed = crate::numerics::rng::derive_seed(cfg.mtl.seed, round);
        round += 1;
        let (mtl, _) = train_mtl(net, ds, swarm, &mtl_cfg)?;
        let preds = mtl.predict_all(&ctx.batch.features)?;
        par_map(&preds, cfg.jobs, |_, p| {
            ctx.score(p, &mtl.norm).map(|r| r.pdpl)
        })
        .into_iter()
        .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineSpec {
    Uniform,
    Margin,
    FeederEnd {
        #[serde(default = "default_feeder_nodes")]
        nodes: Vec<usize>,
        #[serde(default = "default_high")]
        high: f64,
        #[serde(default = "default_low")]
        low: f64,
    },
    Pso {
        #[serde(default)]
        pso: PsoConfig,
    },
}

fn default_feeder_nodes() -> Vec<usize> {
    IEEE33_FEEDER_END.to_vec()
}
fn default_high() -> f64 {
    0.15
}
fn default_low() -> f64 {
    0.05
}

impl BaselineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Uniform => "uniform",
            BaselineSpec::Margin => "margin",
            BaselineSpec::FeederEnd { .. } => "feeder_end",
            BaselineSpec::Pso { .. } => "pso",
        }
    }

    pub fn feeder_end_default() -> Self {
        BaselineSpec::FeederEnd {
            nodes: default_feeder_nodes(),
            high: default_high(),
            low: default_low(),
        }
    }

    /// Weights for this baseline. `margin_net` is the network used for the
    /// no-DG, no-UL power flow; PSO seeds from `seed`.
    pub fn weights(
        &self,
        net: &Network,
        margin_net: &Network,
        ds: &ScenarioDataset,
        wpo: &WpoConfig,
        seed: u64,
    ) -> Result<WeightVector> {
        match self {
            BaselineSpec::Uniform => Ok(weights_uniform(net)),
            BaselineSpec::Margin => {
                if margin_net.ul_nodes != net.ul_nodes {
                    return Err(Error::InvalidArgument(
                        "margin network has different uncertain-load nodes".into(),
                    ));
                }
                weights_margin(margin_net)
            }
            BaselineSpec::FeederEnd { nodes, high, low } => {
                weights_feeder_end(net, nodes, *high, *low)
            }
            BaselineSpec::Pso { pso } => {
                let cfg = PsoConfig {
                    seed,
                    ..pso.clone()
                };
                let fit = mtl_pdpl_fitness(net, ds, wpo)?;
                Ok(weights_pso(net.n_ul(), &cfg, fit)?.w_best)
            }
        }
    }
}
