//! SOCP-relaxed DistFlow dispatch, sweep power flow, realized cost,
//! decision loss and PDPL.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Costs, Network, Topology, DT_HOURS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStatus {
    Optimal,
    Infeasible,
    Numerical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DispatchSolution {
    /// DG setpoints in `net.dg_nodes` order.
    pub p_dg: Vec<f64>,
    pub p_trade: f64,
    pub q_trade: f64,
    /// Squared voltage magnitude per bus (internal order).
    pub v_sq: Vec<f64>,
    /// Squared current per branch.
    pub i_sq: Vec<f64>,
    /// Sending-end (P, Q) per branch.
    pub flows: Vec<(f64, f64)>,
    /// Operation cost in $ for one interval.
    pub objective: f64,
    pub status: DispatchStatus,
    pub iterations: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub v: Vec<f64>,
    pub flows: Vec<(f64, f64)>,
    pub losses: f64,
    pub p_slack: f64,
    pub q_slack: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Largest active/reactive nodal balance mismatch over all buses.
    pub balance_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c_op: f64,
    pub c_pen: f64,
    pub total: f64,
}

/// Sparse conic program `min c'x  s.t.  A x + s = b,  s in K`.
#[derive(Clone, Debug)]
pub struct ConicProblem {
    pub n: usize,
    pub c: Vec<f64>,
    pub rows: Vec<BTreeMap<usize, f64>>,
    pub b: Vec<f64>,
    pub n_zero: usize,
    pub n_nonneg: usize,
    pub soc_dims: Vec<usize>,
}

struct Layout {
    m: usize,
    nb: usize,
    ndg: usize,
}

impl Layout {
    fn p(&self, k: usize) -> usize {
        k
    }
    fn q(&self, k: usize) -> usize {
        self.m + k
    }
    fn i(&self, k: usize) -> usize {
        2 * self.m + k
    }
    fn v(&self, j: usize) -> usize {
        3 * self.m + j
    }
    fn g(&self, d: usize) -> usize {
        3 * self.m + self.nb + d
    }
    fn pt(&self) -> usize {
        3 * self.m + self.nb + self.ndg
    }
    fn qt(&self) -> usize {
        self.pt() + 1
    }
    fn n(&self) -> usize {
        self.qt() + 1
    }
}

#[derive(Default)]
struct RowBlock {
    rows: Vec<BTreeMap<usize, f64>>,
    b: Vec<f64>,
}

impl RowBlock {
    fn push(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let mut row = BTreeMap::new();
        for &(j, a) in terms {
            *row.entry(j).or_insert(0.0) += a;
        }
        self.rows.push(row);
        self.b.push(rhs);
    }
}

/// Per-bus net active injection requirement: fixed load plus uncertain load.
fn bus_loads(net: &Network, ul: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if ul.len() != net.n_ul() {
        return Err(Error::Shape(format!(
            "{} uncertain loads for {} nodes",
            ul.len(),
            net.n_ul()
        )));
    }
    let mut p: Vec<f64> = net.buses.iter().map(|b| b.p_load).collect();
    let q: Vec<f64> = net.buses.iter().map(|b| b.q_load).collect();
    for (&id, &u) in net.ul_nodes.iter().zip(ul) {
        if !(u.is_finite() && u >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "uncertain load at bus {id} is {u}"
            )));
        }
        p[net.bus_index(id)?] += u;
    }
    Ok((p, q))
}

/// Assembles the relaxed dispatch problem for the given uncertain loads.
pub fn build_dispatch_problem(net: &Network, ul: &[f64]) -> Result<ConicProblem> {
    let topo = net.topology()?;
    build_with_topology(net, &topo, ul)
}

fn build_with_topology(net: &Network, topo: &Topology, ul: &[f64]) -> Result<ConicProblem> {
    let (p_load, q_load) = bus_loads(net, ul)?;
    let lay = Layout {
        m: net.branches.len(),
        nb: net.n_buses(),
        ndg: net.dg_nodes.len(),
    };
    let mut dg_at: Vec<Vec<usize>> = vec![Vec::new(); lay.nb];
    for (d, dg) in net.dg_nodes.iter().enumerate() {
        dg_at[net.bus_index(dg.id)?].push(d);
    }
    let child_branches = |j: usize| -> Vec<usize> {
        topo.children[j]
            .iter()
            .map(|&c| topo.parent_branch[c].unwrap())
            .collect()
    };

    let mut eq = RowBlock::default();
    eq.push(&[(lay.v(topo.root), 1.0)], 1.0);
    for (k, br) in net.branches.iter().enumerate() {
        let (i, j) = (topo.branch_parent[k], topo.branch_child[k]);
        eq.push(
            &[
                (lay.v(j), 1.0),
                (lay.v(i), -1.0),
                (lay.p(k), 2.0 * br.r),
                (lay.q(k), 2.0 * br.x),
                (lay.i(k), -(br.r * br.r + br.x * br.x)),
            ],
            0.0,
        );
    }
    for j in 0..lay.nb {
        let mut tp = Vec::new();
        let mut tq = Vec::new();
        match topo.parent_branch[j] {
            Some(k) => {
                let br = &net.branches[k];
                tp.extend([(lay.p(k), 1.0), (lay.i(k), -br.r)]);
                tq.extend([(lay.q(k), 1.0), (lay.i(k), -br.x)]);
            }
            None => {
                tp.push((lay.pt(), 1.0));
                tq.push((lay.qt(), 1.0));
            }
        }
        for c in child_branches(j) {
            tp.push((lay.p(c), -1.0));
            tq.push((lay.q(c), -1.0));
        }
        for &d in &dg_at[j] {
            tp.push((lay.g(d), 1.0));
        }
        eq.push(&tp, p_load[j]);
        eq.push(&tq, q_load[j]);
    }

    let mut ineq = RowBlock::default();
    let (vlo, vhi) = (net.v_min * net.v_min, net.v_max * net.v_max);
    for j in 0..lay.nb {
        if j == topo.root {
            continue;
        }
        ineq.push(&[(lay.v(j), -1.0)], -vlo);
        ineq.push(&[(lay.v(j), 1.0)], vhi);
    }
    for (k, br) in net.branches.iter().enumerate() {
        ineq.push(&[(lay.i(k), 1.0)], br.i_max * br.i_max);
        ineq.push(&[(lay.i(k), -1.0)], 0.0);
    }
    for (d, dg) in net.dg_nodes.iter().enumerate() {
        ineq.push(&[(lay.g(d), -1.0)], 0.0);
        ineq.push(&[(lay.g(d), 1.0)], dg.p_max);
    }
    ineq.push(&[(lay.pt(), -1.0)], 0.0);

    // (V_i + I, 2P, 2Q, V_i - I) in SOC(4), written as s = -A x
    let mut soc = RowBlock::default();
    for k in 0..lay.m {
        let i = topo.branch_parent[k];
        soc.push(&[(lay.v(i), -1.0), (lay.i(k), -1.0)], 0.0);
        soc.push(&[(lay.p(k), -2.0)], 0.0);
        soc.push(&[(lay.q(k), -2.0)], 0.0);
        soc.push(&[(lay.v(i), -1.0), (lay.i(k), 1.0)], 0.0);
    }

    let mut c = vec![0.0; lay.n()];
    c[lay.pt()] = DT_HOURS * net.costs.pi_t;
    for d in 0..lay.ndg {
        c[lay.g(d)] = DT_HOURS * net.costs.pi_g;
    }
    let (n_zero, n_nonneg) = (eq.rows.len(), ineq.rows.len());
    let mut rows = eq.rows;
    rows.extend(ineq.rows);
    rows.extend(soc.rows);
    let mut b = eq.b;
    b.extend(ineq.b);
    b.extend(soc.b);
    Ok(ConicProblem {
        n: lay.n(),
        c,
        rows,
        b,
        n_zero,
        n_nonneg,
        soc_dims: vec![4; lay.m],
    })
}

impl ConicProblem {
    /// Plain-text export: header, objective, A triplets, b, cone list.
    ///
    /// ```text
    /// conic-v1 <n_vars> <n_rows>
    /// c <j> <value>          (nonzeros of the objective)
    /// A <row> <col> <value>  (0-based)
    /// b <row> <value>        (nonzeros)
    /// cone zero <dim> | cone nonneg <dim> | cone soc <dim>   (in row order)
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# minimize c'x subject to A x + s = b, s in K");
        let _ = writeln!(s, "conic-v1 {} {}", self.n, self.rows.len());
        for (j, v) in self.c.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            let _ = writeln!(s, "c {j} {v:.17e}");
        }
        for (r, row) in self.rows.iter().enumerate() {
            for (j, v) in row {
                let _ = writeln!(s, "A {r} {j} {v:.17e}");
            }
        }
        for (r, v) in self.b.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            let _ = writeln!(s, "b {r} {v:.17e}");
        }
        let _ = writeln!(s, "cone zero {}", self.n_zero);
        let _ = writeln!(s, "cone nonneg {}", self.n_nonneg);
        for d in &self.soc_dims {
            let _ = writeln!(s, "cone soc {d}");
        }
        s
    }

    fn solve(&self) -> (SolverStatus, Vec<f64>, f64, u32) {
        let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
        for (r, row) in self.rows.iter().enumerate() {
            for (&j, &v) in row {
                ii.push(r);
                jj.push(j);
                vv.push(v);
            }
        }
        let a = CscMatrix::new_from_triplets(self.rows.len(), self.n, ii, jj, vv);
        let p = CscMatrix::zeros((self.n, self.n));
        let mut cones = vec![
            SupportedConeT::ZeroConeT(self.n_zero),
            SupportedConeT::NonnegativeConeT(self.n_nonneg),
        ];
        cones.extend(
            self.soc_dims
                .iter()
                .map(|&d| SupportedConeT::SecondOrderConeT(d)),
        );
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-9)
            .tol_gap_rel(1e-9)
            .tol_feas(1e-9)
            .build()
            .expect("static solver settings");
        let mut solver = match DefaultSolver::new(&p, &self.c, &a, &self.b, &cones, settings) {
            Ok(s) => s,
            Err(_) => return (SolverStatus::NumericalError, vec![0.0; self.n], f64::NAN, 0),
        };
        solver.solve();
        let sol = &solver.solution;
        (sol.status, sol.x.clone(), sol.obj_val, sol.iterations)
    }
}

/// Solves the relaxed dispatch for predicted uncertain loads `ul` (p.u., UL order).
pub fn solve_dispatch(net: &Network, ul: &[f64]) -> Result<DispatchSolution> {
    let topo = net.topology()?;
    solve_with_topology(net, &topo, ul)
}

fn solve_with_topology(net: &Network, topo: &Topology, ul: &[f64]) -> Result<DispatchSolution> {
    let prob = build_with_topology(net, topo, ul)?;
    let (status, x, _obj, iterations) = prob.solve();
    let lay = Layout {
        m: net.branches.len(),
        nb: net.n_buses(),
        ndg: net.dg_nodes.len(),
    };
    let status = match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => DispatchStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            DispatchStatus::Infeasible
        }
        _ => DispatchStatus::Numerical,
    };
    let p_dg: Vec<f64> = (0..lay.ndg).map(|d| x[lay.g(d)]).collect();
    let p_trade = x[lay.pt()];
    let objective =
        DT_HOURS * (net.costs.pi_t * p_trade + net.costs.pi_g * p_dg.iter().sum::<f64>());
    Ok(DispatchSolution {
        p_dg,
        p_trade,
        q_trade: x[lay.qt()],
        v_sq: (0..lay.nb).map(|j| x[lay.v(j)]).collect(),
        i_sq: (0..lay.m).map(|k| x[lay.i(k)]).collect(),
        flows: (0..lay.m).map(|k| (x[lay.p(k)], x[lay.q(k)])).collect(),
        objective,
        status,
        iterations,
    })
}

/// Max over branches of `|V_i I_ij - P_ij^2 - Q_ij^2|`.
pub fn check_socp_tightness(net: &Network, sol: &DispatchSolution) -> Result<f64> {
    let topo = net.topology()?;
    Ok((0..net.branches.len())
        .map(|k| {
            let (p, q) = sol.flows[k];
            (sol.v_sq[topo.branch_parent[k]] * sol.i_sq[k] - p * p - q * q).abs()
        })
        .fold(0.0, f64::max))
}

pub const PF_TOL: f64 = 1e-10;
pub const PF_MAX_ITER: usize = 200;

/// Forward-backward sweep with the substation as slack at 1.0 p.u.
///
/// `p_dg` is in `net.dg_nodes` order.
pub fn power_flow(net: &Network, ul_true: &[f64], p_dg: &[f64]) -> Result<PowerFlowResult> {
    let topo = net.topology()?;
    power_flow_with_topology(net, &topo, ul_true, p_dg)
}

fn power_flow_with_topology(
    net: &Network,
    topo: &Topology,
    ul_true: &[f64],
    p_dg: &[f64],
) -> Result<PowerFlowResult> {
    if p_dg.len() != net.dg_nodes.len() {
        return Err(Error::Shape(format!(
            "{} DG setpoints for {} units",
            p_dg.len(),
            net.dg_nodes.len()
        )));
    }
    let (mut p_net, q_net) = bus_loads(net, ul_true)?;
    for (dg, &g) in net.dg_nodes.iter().zip(p_dg) {
        p_net[net.bus_index(dg.id)?] -= g;
    }
    let nb = net.n_buses();
    let s_load: Vec<Complex64> = (0..nb)
        .map(|j| Complex64::new(p_net[j], q_net[j]))
        .collect();
    let z: Vec<Complex64> = net
        .branches
        .iter()
        .map(|b| Complex64::new(b.r, b.x))
        .collect();
    let mut v = vec![Complex64::new(1.0, 0.0); nb];
    let mut i_br = vec![Complex64::new(0.0, 0.0); net.branches.len()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < PF_MAX_ITER {
        iterations += 1;
        let mut inj: Vec<Complex64> = (0..nb).map(|j| (s_load[j] / v[j]).conj()).collect();
        for &j in topo.order.iter().rev() {
            if let Some(k) = topo.parent_branch[j] {
                i_br[k] = inj[j];
                let parent = topo.parent[j].unwrap();
                let down = inj[j];
                inj[parent] += down;
            }
        }
        let mut delta: f64 = 0.0;
        for &j in &topo.order {
            if let Some(k) = topo.parent_branch[j] {
                let new = v[topo.parent[j].unwrap()] - z[k] * i_br[k];
                delta = delta.max((new - v[j]).norm());
                v[j] = new;
            }
        }
        if delta < PF_TOL {
            converged = true;
            break;
        }
    }
    let flows: Vec<(f64, f64)> = (0..net.branches.len())
        .map(|k| {
            let s = v[topo.branch_parent[k]] * i_br[k].conj();
            (s.re, s.im)
        })
        .collect();
    let losses: f64 = (0..net.branches.len())
        .map(|k| net.branches[k].r * i_br[k].norm_sqr())
        .sum();
    let root = topo.root;
    let mut s_root = s_load[root];
    for &c in &topo.children[root] {
        let (p, q) = flows[topo.parent_branch[c].unwrap()];
        s_root += Complex64::new(p, q);
    }
    let mut balance_residual: f64 = 0.0;
    for j in 0..nb {
        let mut s = -s_load[j];
        if let Some(k) = topo.parent_branch[j] {
            s += v[j] * i_br[k].conj();
        } else {
            s += s_root;
        }
        for &c in &topo.children[j] {
            let k = topo.parent_branch[c].unwrap();
            s -= v[j] * i_br[k].conj();
        }
        balance_residual = balance_residual.max(s.re.abs()).max(s.im.abs());
    }
    Ok(PowerFlowResult {
        v: v.iter().map(|x| x.norm()).collect(),
        flows,
        losses,
        p_slack: s_root.re,
        q_slack: s_root.im,
        converged,
        iterations,
        balance_residual,
    })
}

/// Realized cost of dispatch `sol` when the uncertain loads turn out to be `ul_true`.
pub fn realized_cost(
    net: &Network,
    sol: &DispatchSolution,
    ul_true: &[f64],
) -> Result<CostBreakdown> {
    let topo = net.topology()?;
    realized_with_topology(net, &topo, sol, ul_true).map(|(c, _)| c)
}

fn realized_with_topology(
    net: &Network,
    topo: &Topology,
    sol: &DispatchSolution,
    ul_true: &[f64],
) -> Result<(CostBreakdown, PowerFlowResult)> {
    let pf = power_flow_with_topology(net, topo, ul_true, &sol.p_dg)?;
    if !pf.converged {
        return Err(Error::PowerFlow {
            iterations: pf.iterations,
        });
    }
    let c = cost_of(&net.costs, net.v_min, &sol.p_dg, &pf);
    Ok((c, pf))
}

pub fn cost_of(costs: &Costs, v_min: f64, p_dg: &[f64], pf: &PowerFlowResult) -> CostBreakdown {
    let c_op =
        DT_HOURS * (costs.pi_t * pf.p_slack.max(0.0) + costs.pi_g * p_dg.iter().sum::<f64>());
    let shortfall: f64 = pf.v.iter().map(|v| (v_min - v).max(0.0)).sum();
    let c_pen = DT_HOURS * costs.pi_p * shortfall;
    CostBreakdown {
        c_op,
        c_pen,
        total: c_op + c_pen,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionLoss {
    pub loss: f64,
    /// Realized cost of acting on the prediction.
    pub predicted: CostBreakdown,
    /// Realized cost of the perfect-information decision.
    pub oracle: CostBreakdown,
    /// Per-bus realized voltage under the prediction-based decision.
    pub v_realized: Vec<f64>,
}

/// Evaluates one dispatch decision against the truth; shared by every code path.
pub struct Evaluator<'a> {
    net: &'a Network,
    topo: Topology,
}

impl<'a> Evaluator<'a> {
    pub fn new(net: &'a Network) -> Result<Self> {
        Ok(Evaluator {
            net,
            topo: net.topology()?,
        })
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn dispatch(&self, ul: &[f64]) -> Result<DispatchSolution> {
        solve_with_topology(self.net, &self.topo, ul)
    }

    /// Realized cost of the decision for `ul_pred` under `ul_true`.
    pub fn act(
        &self,
        ul_pred: &[f64],
        ul_true: &[f64],
    ) -> Result<(CostBreakdown, PowerFlowResult)> {
        let sol = self.dispatch(ul_pred)?;
        if sol.status != DispatchStatus::Optimal {
            return Err(Error::Dispatch {
                sample: 0,
                status: format!("{:?}", sol.status),
            });
        }
        realized_with_topology(self.net, &self.topo, &sol, ul_true)
    }

    pub fn oracle_cost(&self, ul_true: &[f64]) -> Result<CostBreakdown> {
        self.act(ul_true, ul_true).map(|(c, _)| c)
    }

    pub fn decision_loss(&self, ul_pred: &[f64], ul_true: &[f64]) -> Result<DecisionLoss> {
        let oracle = self.oracle_cost(ul_true)?;
        self.decision_loss_with_oracle(ul_pred, ul_true, oracle)
    }

    pub fn decision_loss_with_oracle(
        &self,
        ul_pred: &[f64],
        ul_true: &[f64],
        oracle: CostBreakdown,
    ) -> Result<DecisionLoss> {
        let (predicted, pf) = self.act(ul_pred, ul_true)?;
        Ok(DecisionLoss {
            loss: predicted.total - oracle.total,
            predicted,
            oracle,
            v_realized: pf.v,
        })
    }
}

/// `f(z_pred, xi) - f(z_true, xi)` with `f` the realized total cost.
pub fn decision_loss(net: &Network, ul_pred: &[f64], ul_true: &[f64]) -> Result<f64> {
    Ok(Evaluator::new(net)?.decision_loss(ul_pred, ul_true)?.loss)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleLoss {
    /// Time-step index of the sample in the dataset.
    pub step: usize,
    pub loss: f64,
    pub c_op: f64,
    pub c_pen: f64,
    pub oracle_total: f64,
    /// Minimum realized voltage under the prediction-based decision.
    pub v_min: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdplReport {
    pub pdpl: f64,
    pub samples: Vec<SampleLoss>,
    /// Per-bus minimum realized voltage over all samples (internal bus order).
    pub bus_v_min: Vec<f64>,
}

/// Perfect-information realized costs per eval sample, computed once and
/// reused by every predictor evaluated on the same truths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleCache {
    pub costs: Vec<CostBreakdown>,
}

impl OracleCache {
    pub fn build(ev: &Evaluator, truths: &[Vec<f64>]) -> Result<Self> {
        let costs = truths
            .iter()
            .enumerate()
            .map(|(s, t)| ev.oracle_cost(t).map_err(|e| tag_sample(e, s)))
            .collect::<Result<_>>()?;
        Ok(OracleCache { costs })
    }
}

fn tag_sample(e: Error, sample: usize) -> Error {
    match e {
        Error::Dispatch { status, .. } => Error::Dispatch { sample, status },
        other => Error::Dispatch {
            sample,
            status: other.to_string(),
        },
    }
}

/// Mean decision loss of `predictions` against `truths`, summed in sample order.
pub fn pdpl(
    ev: &Evaluator,
    predictions: &[Vec<f64>],
    truths: &[Vec<f64>],
    steps: &[usize],
    oracle: &OracleCache,
) -> Result<PdplReport> {
    if truths.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if predictions.len() != truths.len()
        || oracle.costs.len() != truths.len()
        || steps.len() != truths.len()
    {
        return Err(Error::Shape(format!(
            "{} predictions, {} truths, {} oracle costs, {} steps",
            predictions.len(),
            truths.len(),
            oracle.costs.len(),
            steps.len()
        )));
    }
    let nb = ev.network().n_buses();
    let mut bus_v_min = vec![f64::INFINITY; nb];
    let mut samples = Vec::with_capacity(truths.len());
    for s in 0..truths.len() {
        let d = ev
            .decision_loss_with_oracle(&predictions[s], &truths[s], oracle.costs[s])
            .map_err(|e| tag_sample(e, s))?;
        for (m, v) in bus_v_min.iter_mut().zip(&d.v_realized) {
            *m = m.min(*v);
        }
        samples.push(SampleLoss {
            step: steps[s],
            loss: d.loss,
            c_op: d.predicted.c_op,
            c_pen: d.predicted.c_pen,
            oracle_total: d.oracle.total,
            v_min: d.v_realized.iter().cloned().fold(f64::INFINITY, f64::min),
        });
    }
    let mean = samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64;
    Ok(PdplReport {
        pdpl: mean,
        samples,
        bus_v_min,
    })
}
