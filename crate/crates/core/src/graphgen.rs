//! Graph states built with the entangling bus: the ideal iterative
//! protocol and noisy constructions from extracted two-qubit gates.
//!
//! Vertices are numbered from 0; qubit 0 is the most significant bit of
//! every state vector. Register slot `j` (1-based) sits next to chain site
//! `j`, so a qubit swapped in from slot `j` comes out at slot `N − j + 1`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::analyze;
use crate::chain::{self, ChainError, ChainSpec};
use crate::evolve::{self, EvolutionJob, EvolveError, ProbeConfig, Representation};
use crate::noise::NoiseSpec;
use crate::numkit::{self, CMat, CVec, ChoiState, DensityMatrix, NumkitError, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("graph with {n} vertices does not fit a chain of {chain} sites")]
    TooLarge { n: usize, chain: usize },
    #[error("no gate for site pair {0:?}")]
    MissingGate((usize, usize)),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Simple undirected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    n: usize,
    adj: Vec<Vec<bool>>,
}

impl GraphSpec {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 || n > 12 {
            return Err(GraphError::InvalidGraph(format!(
                "{n} vertices not in 1..=12"
            )));
        }
        let mut adj = vec![vec![false; n]; n];
        for &(u, v) in edges {
            if u >= n || v >= n || u == v {
                return Err(GraphError::InvalidGraph(format!("edge ({u}, {v})")));
            }
            adj[u][v] = true;
            adj[v][u] = true;
        }
        Ok(Self { n, adj })
    }

    /// Path 0-1-…-(n−1).
    pub fn linear_cluster(n: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
        Self::from_edges(n, &edges)
    }

    /// Star centred on vertex 0.
    pub fn ghz_star(n: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u][v]
    }

    /// Edges (u, v) with u < v in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.adj[u][v] {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adj
    }
}

/// ∏_{(u,v)} CZ_{uv} |+⟩^{⊗n}.
pub fn ideal_graph_state(graph: &GraphSpec) -> CVec {
    let n = graph.n;
    let d = 1usize << n;
    let amp = 1.0 / (d as f64).sqrt();
    let edges = graph.edges();
    CVec::from_fn(d, |x, _| {
        let bit = |v: usize| (x >> (n - 1 - v)) & 1;
        let parity: usize = edges.iter().map(|&(u, v)| bit(u) & bit(v)).sum();
        C64::new(if parity.is_multiple_of(2) { amp } else { -amp }, 0.0)
    })
}

/// Apply the diagonal inversion circuit to the logical qubits `qubits`,
/// placed on chain `sites`.
fn apply_bus(
    state: &mut CVec,
    n: usize,
    chain: &ChainSpec,
    qubits: &[usize],
    sites: &[usize],
) -> Result<()> {
    let u = chain::ideal_circuit(chain, sites)?;
    let q = qubits.len();
    for x in 0..state.len() {
        let mut local = 0usize;
        for (k, &v) in qubits.iter().enumerate() {
            if (x >> (n - 1 - v)) & 1 == 1 {
                local |= 1 << (q - 1 - k);
            }
        }
        state[x] *= u[(local, local)];
    }
    Ok(())
}

/// Result of the noiseless iterative protocol.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub state: CVec,
    /// Number of τ-evolutions of the bus.
    pub uses: usize,
    /// Final register slot of each vertex.
    pub positions: Vec<usize>,
}

/// Iterative protocol: for each vertex g, send g and its later neighbours
/// through the bus (all pairs toggled), then send the neighbours alone
/// once more to undo the pairs among them. Vertices start in slots 1..=n.
pub fn ideal_protocol(graph: &GraphSpec, chain: &ChainSpec) -> Result<ProtocolRun> {
    protocol_from(graph, chain, numkit::plus_state(graph.n))
}

/// The same protocol applied to an arbitrary register state.
pub fn protocol_from(graph: &GraphSpec, chain: &ChainSpec, initial: CVec) -> Result<ProtocolRun> {
    let n = graph.n;
    let limit = chain.n().div_ceil(2);
    if n > limit {
        return Err(GraphError::TooLarge {
            n,
            chain: chain.n(),
        });
    }
    if initial.len() != 1 << n {
        return Err(GraphError::InvalidGraph(format!(
            "state of length {} for {n} vertices",
            initial.len()
        )));
    }
    let mut state = initial;
    let mut positions: Vec<usize> = (1..=n).collect();
    let mut uses = 0;
    for g in 0..n {
        let later: Vec<usize> = (g + 1..n).filter(|&v| graph.adj[g][v]).collect();
        if later.is_empty() {
            continue;
        }
        let mut qubits = vec![g];
        qubits.extend(&later);
        let sites: Vec<usize> = qubits.iter().map(|&v| positions[v]).collect();
        apply_bus(&mut state, n, chain, &qubits, &sites)?;
        for &v in &qubits {
            positions[v] = chain.mirror_site(positions[v]);
        }
        uses += 1;
        let sites: Vec<usize> = later.iter().map(|&v| positions[v]).collect();
        apply_bus(&mut state, n, chain, &later, &sites)?;
        for &v in &later {
            positions[v] = chain.mirror_site(positions[v]);
        }
        uses += 1;
    }
    Ok(ProtocolRun {
        state,
        uses,
        positions,
    })
}

/// Gate ordering for the noisy two-qubit construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Edges in lexicographic vertex order.
    Sequential,
    /// Closest pair in the register first; ties to the lowest labels.
    Closest,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Sequential => "i",
            Scheme::Closest => "ii",
        }
    }
}

/// One use of the bus: vertices (u, v) entering at chain sites (site_u, site_v).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateStep {
    pub u: usize,
    pub v: usize,
    pub site_u: usize,
    pub site_v: usize,
}

impl GateStep {
    /// Library key: the site pair in ascending order.
    pub fn key(&self) -> (usize, usize) {
        (self.site_u.min(self.site_v), self.site_u.max(self.site_v))
    }
}

/// Order the edges and track register slots (mirror relocation after every use).
pub fn plan_gates(graph: &GraphSpec, n_sites: usize, scheme: Scheme) -> Result<Vec<GateStep>> {
    let n = graph.n;
    if 2 * n > n_sites {
        return Err(GraphError::TooLarge { n, chain: n_sites });
    }
    let mut positions: Vec<usize> = (1..=n).collect();
    let mut remaining = graph.edges();
    let mut plan = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let idx = match scheme {
            Scheme::Sequential => 0,
            Scheme::Closest => {
                // `remaining` stays lexicographically sorted, so the first minimum wins ties.
                let dist = |&(u, v): &(usize, usize)| positions[u].abs_diff(positions[v]);
                let best = remaining.iter().map(dist).min().expect("nonempty");
                remaining
                    .iter()
                    .position(|e| dist(e) == best)
                    .expect("minimum exists")
            }
        };
        let (u, v) = remaining.remove(idx);
        plan.push(GateStep {
            u,
            v,
            site_u: positions[u],
            site_v: positions[v],
        });
        positions[u] = n_sites + 1 - positions[u];
        positions[v] = n_sites + 1 - positions[v];
    }
    Ok(plan)
}

/// Two-qubit channels of the noisy bus for each site pair (ascending sites;
/// logical qubit order follows the site order).
pub fn noisy_gate_library(
    chain: &ChainSpec,
    noise: &NoiseSpec,
    site_pairs: &[(usize, usize)],
) -> Result<BTreeMap<(usize, usize), ChoiState>> {
    let keys: BTreeSet<(usize, usize)> = site_pairs
        .iter()
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    let keys: Vec<(usize, usize)> = keys.into_iter().collect();
    let job =
        EvolutionJob::new(*chain, *noise).with_representation(Representation::auto(noise, 2))?;
    let chois = keys
        .par_iter()
        .map(|&(a, b)| {
            let probe = ProbeConfig::new(vec![a, b], chain.n())?;
            evolve::extract_channel(&job, &probe)
        })
        .collect::<std::result::Result<Vec<_>, EvolveError>>()?;
    Ok(keys.into_iter().zip(chois).collect())
}

/// Embed a two-qubit operator acting on qubits (x, y) of an n-qubit register.
fn embed_two_qubit(op: &CMat, n: usize, x: usize, y: usize) -> CMat {
    let d = 1usize << n;
    let (bx, by) = (n - 1 - x, n - 1 - y);
    let mut out = CMat::zeros(d, d);
    for col in 0..d {
        let cin = ((col >> bx) & 1) << 1 | ((col >> by) & 1);
        let rest = col & !(1 << bx) & !(1 << by);
        for rin in 0..4 {
            let v = op[(rin, cin)];
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            let row = rest | ((rin >> 1) & 1) << bx | (rin & 1) << by;
            out[(row, col)] = v;
        }
    }
    out
}

/// Logical register after a noisy construction.
#[derive(Debug, Clone)]
pub struct RegisterState {
    pub register_size: usize,
    /// Current slot of each vertex.
    pub positions: Vec<usize>,
    pub state: DensityMatrix,
}

#[derive(Debug, Clone)]
pub struct NoisyGraphResult {
    pub register: RegisterState,
    pub plan: Vec<GateStep>,
    /// ⟨G|ρ|G⟩
    pub fidelity: f64,
}

/// Apply the planned gates from a prepared library, starting from |+⟩^{⊗n}.
pub fn assemble_graph_state(
    graph: &GraphSpec,
    n_sites: usize,
    plan: &[GateStep],
    library: &BTreeMap<(usize, usize), ChoiState>,
) -> Result<NoisyGraphResult> {
    let n = graph.n;
    let plus = numkit::plus_state(n);
    let mut rho = &plus * plus.adjoint();
    let mut positions: Vec<usize> = (1..=n).collect();
    for step in plan {
        let key = step.key();
        let choi = library.get(&key).ok_or(GraphError::MissingGate(key))?;
        // Logical qubit order of the library channel follows ascending sites.
        let (first, second) = if step.site_u < step.site_v {
            (step.u, step.v)
        } else {
            (step.v, step.u)
        };
        let kraus = evolve::choi_to_kraus(choi)?;
        let mut next = CMat::zeros(rho.nrows(), rho.ncols());
        for a in kraus.operators() {
            let big = embed_two_qubit(a, n, first, second);
            next += &big * &rho * big.adjoint();
        }
        rho = next;
        positions[step.u] = n_sites + 1 - positions[step.u];
        positions[step.v] = n_sites + 1 - positions[step.v];
    }
    let target = ideal_graph_state(graph);
    let fidelity = (target.adjoint() * &rho * &target)[(0, 0)].re;
    let state = DensityMatrix::with_tolerance(
        numkit::Operator::new(numkit::hermitian_part(&rho), vec![2; n])?,
        1e-8,
        1e-8,
        1e-8,
    )?;
    Ok(NoisyGraphResult {
        register: RegisterState {
            register_size: n_sites,
            positions,
            state,
        },
        plan: plan.to_vec(),
        fidelity,
    })
}

/// Build the graph with noisy two-qubit bus uses in the order given by `scheme`.
pub fn build_graph_state_noisy(
    graph: &GraphSpec,
    chain: &ChainSpec,
    noise: &NoiseSpec,
    scheme: Scheme,
) -> Result<NoisyGraphResult> {
    let plan = plan_gates(graph, chain.n(), scheme)?;
    let keys: Vec<(usize, usize)> = plan.iter().map(GateStep::key).collect();
    let library = noisy_gate_library(chain, noise, &keys)?;
    assemble_graph_state(graph, chain.n(), &plan, &library)
}

/// Average fidelity of a library gate against the controlled phase.
pub fn gate_fidelity(choi: &ChoiState) -> Result<f64> {
    analyze::avg_fidelity(choi, &numkit::cz()).map_err(|e| GraphError::InvalidGraph(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_four_edges() {
        assert_eq!(
            GraphSpec::linear_cluster(5).unwrap().edges(),
            vec![(0, 1), (1, 2), (2, 3), (3, 4)]
        );
        assert_eq!(
            GraphSpec::ghz_star(5).unwrap().edges(),
            vec![(0, 1), (0, 2), (0, 3), (0, 4)]
        );
        assert!(GraphSpec::from_edges(3, &[(0, 0)]).is_err());
        assert!(GraphSpec::from_edges(3, &[(0, 3)]).is_err());
    }

    #[test]
    fn sequential_plan_tracks_mirrors() {
        let g = GraphSpec::linear_cluster(3).unwrap();
        let plan = plan_gates(&g, 10, Scheme::Sequential).unwrap();
        assert_eq!(
            plan[0],
            GateStep {
                u: 0,
                v: 1,
                site_u: 1,
                site_v: 2
            }
        );
        // vertex 1 now sits in slot 9, vertex 2 still in slot 3
        assert_eq!(
            plan[1],
            GateStep {
                u: 1,
                v: 2,
                site_u: 9,
                site_v: 3
            }
        );
    }

    #[test]
    fn embed_matches_kron_on_adjacent_qubits() {
        let op = numkit::kron(&numkit::pauli_x(), &numkit::pauli_z());
        let big = embed_two_qubit(&op, 3, 0, 1);
        let expected = numkit::kron(&op, &numkit::identity(2));
        assert!((big - expected).iter().all(|z| z.norm() < 1e-15));
        let swapped = embed_two_qubit(&op, 2, 1, 0);
        let expected = numkit::kron(&numkit::pauli_z(), &numkit::pauli_x());
        assert!((swapped - expected).iter().all(|z| z.norm() < 1e-15));
    }
}
