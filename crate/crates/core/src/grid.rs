//! Radial distribution networks, the modified IEEE 33-bus feeder and its
//! admittance-weighted graph spectrum.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::symmetric_eigen;
use crate::numerics::Tensor;

/// Interval length in hours; every cost term is multiplied by it.
pub const DT_HOURS: f64 = 0.25;

/// Base power of the shipped feeder in MVA.
pub const IEEE33_BASE_MVA: f64 = 10.0;
/// Nominal line-to-line voltage of the shipped feeder in kV.
pub const IEEE33_BASE_KV: f64 = 12.66;
pub const IEEE33_LOAD_SCALE: f64 = 1.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub i_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgUnit {
    pub id: usize,
    pub p_max: f64,
}

/// Prices in $ per p.u.-hour; realized per interval as price * DT_HOURS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub pi_t: f64,
    pub pi_g: f64,
    pub pi_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub ul_nodes: Vec<usize>,
    pub dg_nodes: Vec<DgUnit>,
    pub v_min: f64,
    pub v_max: f64,
    pub substation: usize,
    pub costs: Costs,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    BranchCount {
        buses: usize,
        branches: usize,
    },
    NotATree,
    Disconnected(Vec<usize>),
    UnknownBus {
        context: String,
        id: usize,
    },
    DuplicateBus(usize),
    NonpositiveImpedance {
        branch: usize,
        from: usize,
        to: usize,
    },
    NonpositiveCurrentLimit {
        branch: usize,
    },
    VoltageBounds {
        v_min: f64,
        v_max: f64,
    },
    NegativeLoad(usize),
    NegativeDgCap(usize),
    DuplicateUlNode(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BranchCount { buses, branches } => {
                write!(f, "not a tree: {branches} branches for {buses} buses")
            }
            Violation::NotATree => write!(f, "not a tree: branch set contains a cycle"),
            Violation::Disconnected(ids) => write!(f, "buses {ids:?} unreachable from substation"),
            Violation::UnknownBus { context, id } => {
                write!(f, "{context} references unknown bus {id}")
            }
            Violation::DuplicateBus(id) => write!(f, "bus {id} listed twice"),
            Violation::NonpositiveImpedance { branch, from, to } => {
                write!(f, "nonpositive impedance on branch {branch} ({from}-{to})")
            }
            Violation::NonpositiveCurrentLimit { branch } => {
                write!(f, "nonpositive current limit on branch {branch}")
            }
            Violation::VoltageBounds { v_min, v_max } => {
                write!(
                    f,
                    "voltage bounds must satisfy v_min < 1 < v_max, got [{v_min}, {v_max}]"
                )
            }
            Violation::NegativeLoad(id) => write!(f, "negative fixed load at bus {id}"),
            Violation::NegativeDgCap(id) => write!(f, "negative DG cap at bus {id}"),
            Violation::DuplicateUlNode(id) => write!(f, "uncertain-load node {id} listed twice"),
        }
    }
}

/// Parent/child structure of a validated radial network, in internal indices.
#[derive(Clone, Debug)]
pub struct Topology {
    pub root: usize,
    /// Buses in breadth-first order from the root.
    pub order: Vec<usize>,
    /// Branch feeding each bus (`None` at the root).
    pub parent_branch: Vec<Option<usize>>,
    pub parent: Vec<Option<usize>>,
    /// Downstream (child) bus of every branch.
    pub branch_child: Vec<usize>,
    pub branch_parent: Vec<usize>,
    pub children: Vec<Vec<usize>>,
}

impl Network {
    pub fn from_json_str(s: &str) -> Result<Network> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Network> {
        let s = std::fs::read_to_string(path)?;
        Network::from_json_str(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_ul(&self) -> usize {
        self.ul_nodes.len()
    }

    /// Internal index of bus `id`.
    pub fn bus_index(&self, id: usize) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::Network(format!("unknown bus {id}")))
    }

    /// Internal indices of the uncertain-load nodes, in weight-vector order.
    pub fn ul_indices(&self) -> Result<Vec<usize>> {
        self.ul_nodes.iter().map(|&id| self.bus_index(id)).collect()
    }

    /// Copy with every fixed load multiplied by `factor`.
    pub fn with_scaled_loads(&self, factor: f64) -> Network {
        let mut n = self.clone();
        for b in &mut n.buses {
            b.p_load *= factor;
            b.q_load *= factor;
        }
        n
    }

    pub fn with_costs(&self, costs: Costs) -> Network {
        Network {
            costs,
            ..self.clone()
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        validate_network(self).map_err(|v| {
            Error::Network(
                v.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })?;
        let n = self.n_buses();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in self.branches.iter().enumerate() {
            let a = self.bus_index(br.from)?;
            let b = self.bus_index(br.to)?;
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let root = self.bus_index(self.substation)?;
        let mut parent_branch = vec![None; n];
        let mut parent = vec![None; n];
        let mut branch_child = vec![0; self.branches.len()];
        let mut branch_parent = vec![0; self.branches.len()];
        let mut children = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    parent_branch[v] = Some(k);
                    branch_child[k] = v;
                    branch_parent[k] = u;
                    children[u].push(v);
                    queue.push_back(v);
                }
            }
        }
        Ok(Topology {
            root,
            order,
            parent_branch,
            parent,
            branch_child,
            branch_parent,
            children,
        })
    }

    /// Hop distances between all pairs of buses (internal indices).
    pub fn hop_distances(&self) -> Result<Vec<Vec<usize>>> {
        let topo = self.topology()?;
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for (k, _) in self.branches.iter().enumerate() {
            adj[topo.branch_parent[k]].push(topo.branch_child[k]);
            adj[topo.branch_child[k]].push(topo.branch_parent[k]);
        }
        let mut d = vec![vec![usize::MAX; n]; n];
        for s in 0..n {
            d[s][s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[s][v] == usize::MAX {
                        d[s][v] = d[s][u] + 1;
                        q.push_back(v);
                    }
                }
            }
        }
        Ok(d)
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_network(net: &Network) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut ids = BTreeMap::new();
    for (i, b) in net.buses.iter().enumerate() {
        if ids.insert(b.id, i).is_some() {
            out.push(Violation::DuplicateBus(b.id));
        }
        if b.p_load < 0.0 {
            out.push(Violation::NegativeLoad(b.id));
        }
    }
    let known = |id: usize| ids.contains_key(&id);
    if !known(net.substation) {
        out.push(Violation::UnknownBus {
            context: "substation".into(),
            id: net.substation,
        });
    }
    if net.branches.len() + 1 != net.buses.len() {
        out.push(Violation::BranchCount {
            buses: net.buses.len(),
            branches: net.branches.len(),
        });
    }
    let mut uf = UnionFind::new(net.buses.len());
    let mut cyclic = false;
    for (k, br) in net.branches.iter().enumerate() {
        for id in [br.from, br.to] {
            if !known(id) {
                out.push(Violation::UnknownBus {
                    context: format!("branch {k}"),
                    id,
                });
            }
        }
        if !(br.r > 0.0 && br.x > 0.0) {
            out.push(Violation::NonpositiveImpedance {
                branch: k,
                from: br.from,
                to: br.to,
            });
        }
        if !(br.i_max > 0.0) {
            out.push(Violation::NonpositiveCurrentLimit { branch: k });
        }
        if let (Some(&a), Some(&b)) = (ids.get(&br.from), ids.get(&br.to)) {
            if !uf.union(a, b) {
                cyclic = true;
            }
        }
    }
    if cyclic {
        out.push(Violation::NotATree);
    }
    if let Some(&root) = ids.get(&net.substation) {
        let cut: Vec<usize> = net
            .buses
            .iter()
            .enumerate()
            .filter(|(i, _)| uf.find(*i) != uf.find(root))
            .map(|(_, b)| b.id)
            .collect();
        if !cut.is_empty() {
            out.push(Violation::Disconnected(cut));
        }
    }
    if !(net.v_min < 1.0 && 1.0 < net.v_max) {
        out.push(Violation::VoltageBounds {
            v_min: net.v_min,
            v_max: net.v_max,
        });
    }
    let mut seen = BTreeSet::new();
    for &id in &net.ul_nodes {
        if !known(id) {
            out.push(Violation::UnknownBus {
                context: "ul_nodes".into(),
                id,
            });
        }
        if !seen.insert(id) {
            out.push(Violation::DuplicateUlNode(id));
        }
    }
    for dg in &net.dg_nodes {
        if !known(dg.id) {
            out.push(Violation::UnknownBus {
                context: "dg_nodes".into(),
                id: dg.id,
            });
        }
        if dg.p_max < 0.0 {
            out.push(Violation::NegativeDgCap(dg.id));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpectrum {
    pub adjacency: Tensor,
    pub degree: Vec<f64>,
    pub laplacian: Tensor,
    pub scaled_laplacian: Tensor,
    pub lambda_max: f64,
}

/// Normalized Laplacian of the branch graph weighted by `1/|z|`.
pub fn graph_spectrum(net: &Network) -> Result<GraphSpectrum> {
    let n = net.n_buses();
    let mut w = Tensor::zeros(&[n, n]);
    for br in &net.branches {
        let a = net.bus_index(br.from)?;
        let b = net.bus_index(br.to)?;
        let y = 1.0 / br.r.hypot(br.x);
        w.set(a, b, w.get(a, b) + y);
        w.set(b, a, w.get(b, a) + y);
    }
    spectrum_from_adjacency(w)
}

pub fn spectrum_from_adjacency(w: Tensor) -> Result<GraphSpectrum> {
    let (n, _) = w.as_2d();
    let degree: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    if let Some(i) = degree.iter().position(|d| *d <= 0.0) {
        return Err(Error::Network(format!(
            "node {i} is isolated (zero degree)"
        )));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lap = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            // evaluated in a fixed operand order so that L is symmetric bit for bit
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            let off = inv_sqrt[lo] * w.get(lo, hi) * inv_sqrt[hi];
            lap.set(i, j, delta - off);
        }
    }
    let (vals, _) = symmetric_eigen(&lap)?;
    let lambda_max = *vals.last().unwrap();
    let scaled = lap.zip(&Tensor::identity(n), |l, e| 2.0 * l / lambda_max - e)?;
    Ok(GraphSpectrum {
        adjacency: w,
        degree,
        laplacian: lap,
        scaled_laplacian: scaled,
        lambda_max,
    })
}

/// Cost profiles selectable by experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostProfile {
    /// pi_G = 10, pi_T = 20, pi_p = 100.
    Paper,
    /// DG dearer than import (pi_G = 20, pi_T = 10, pi_p = 100), so DG is
    /// dispatched for voltage support rather than energy.
    VoltageSupport,
}

impl CostProfile {
    pub fn costs(self) -> Costs {
        match self {
            CostProfile::Paper => Costs {
                pi_t: 20.0,
                pi_g: 10.0,
                pi_p: 100.0,
            },
            CostProfile::VoltageSupport => Costs {
                pi_t: 10.0,
                pi_g: 20.0,
                pi_p: 100.0,
            },
        }
    }
}

const IEEE33_BRANCHES: [(usize, usize, f64, f64); 32] = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
];

const IEEE33_P_KW: [f64; 33] = [
    0.0, 100.0, 90.0, 120.0, 60.0, 60.0, 200.0, 200.0, 60.0, 60.0, 45.0, 60.0, 60.0, 120.0, 60.0,
    60.0, 60.0, 90.0, 90.0, 90.0, 90.0, 90.0, 90.0, 420.0, 420.0, 60.0, 60.0, 60.0, 120.0, 200.0,
    150.0, 210.0, 60.0,
];

const IEEE33_Q_KVAR: [f64; 33] = [
    0.0, 60.0, 40.0, 80.0, 30.0, 20.0, 100.0, 100.0, 20.0, 20.0, 30.0, 35.0, 35.0, 80.0, 10.0,
    20.0, 20.0, 40.0, 40.0, 40.0, 40.0, 40.0, 50.0, 200.0, 200.0, 25.0, 25.0, 20.0, 70.0, 600.0,
    70.0, 100.0, 40.0,
];

pub const IEEE33_UL_NODES: [usize; 12] = [8, 12, 14, 16, 18, 22, 25, 27, 29, 30, 31, 33];
pub const IEEE33_DG_NODES: [usize; 6] = [7, 13, 17, 20, 29, 32];
/// Uncertain-load nodes on the main feeder towards bus 18.
pub const IEEE33_BRANCH1_UL: [usize; 5] = [8, 12, 14, 16, 18];
/// Uncertain-load nodes on the lateral towards bus 33.
pub const IEEE33_BRANCH2_UL: [usize; 4] = [29, 30, 31, 33];
pub const IEEE33_FEEDER_END: [usize; 4] = [16, 18, 31, 33];

/// The 33-bus feeder with its original (unscaled) fixed loads and no DG.
pub fn ieee33_original() -> Network {
    let z_base = IEEE33_BASE_KV * IEEE33_BASE_KV / IEEE33_BASE_MVA;
    let s_kva = IEEE33_BASE_MVA * 1000.0;
    let buses = (0..33)
        .map(|i| Bus {
            id: i + 1,
            p_load: IEEE33_P_KW[i] / s_kva,
            q_load: IEEE33_Q_KVAR[i] / s_kva,
        })
        .collect();
    let branches = IEEE33_BRANCHES
        .iter()
        .map(|&(f, t, r, x)| Branch {
            from: f,
            to: t,
            r: r / z_base,
            x: x / z_base,
            i_max: 1.0,
        })
        .collect();
    Network {
        buses,
        branches,
        ul_nodes: IEEE33_UL_NODES.to_vec(),
        dg_nodes: Vec::new(),
        v_min: 0.90,
        v_max: 1.10,
        substation: 1,
        costs: CostProfile::Paper.costs(),
    }
}

/// Modified 33-bus feeder: loads x1.05, six 1 p.u. DG units, twelve
/// uncertain-load nodes, voltage band [0.90, 1.10], pi_G=10, pi_T=20, pi_p=100.
pub fn load_ieee33() -> Network {
    let mut net = ieee33_original().with_scaled_loads(IEEE33_LOAD_SCALE);
    net.dg_nodes = IEEE33_DG_NODES
        .iter()
        .map(|&id| DgUnit { id, p_max: 1.0 })
        .collect();
    net
}
