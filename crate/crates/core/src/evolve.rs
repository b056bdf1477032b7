//! Master-equation integration for the noisy chain and channel extraction.
//!
//! The Hamiltonian and every local jump operator are covariant under the
//! excitation-number phase rotation, so an operator block `(n, m)` (row
//! sector n, column sector m) only ever feeds blocks with the same charge
//! `n − m`. States are therefore stored as a list of dense sector blocks of
//! a single charge (or of all charges for density matrices), and the
//! uniform field `h n` is removed by working in its rotating frame: it adds
//! the phase `e^{−i h (n−m) t}` to each block at the end.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{self, Basis, ChainError, ChainSpec, SectorBasis};
use crate::noise::{NoiseError, NoiseSpec};
use crate::numkit::{self, CMat, ChoiState, DensityMatrix, KrausSet, NumkitError, Operator, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error("representation {0} is not valid for this job")]
    Representation(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error(
        "state does not match the job's representation (expected dim {expected}, found {found})"
    )]
    StateMismatch { expected: usize, found: usize },
    #[error("integration failed: step size underflow at t = {t_reached}")]
    StepUnderflow { t_reached: f64 },
    #[error("invariant violated at t = {t}: {what} = {value:e}")]
    InvariantViolation {
        what: &'static str,
        value: f64,
        t: f64,
    },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

pub type Result<T> = std::result::Result<T, EvolveError>;

/// Which part of the chain Hilbert space is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    FullSpace,
    /// Excitation sectors 0..=max_n. Exact when no jump creates excitations.
    Sector {
        max_n: usize,
    },
}

impl Representation {
    /// Sector truncation when the noise allows it, full space otherwise.
    pub fn auto(noise: &NoiseSpec, max_n: usize) -> Self {
        if noise.preserves_low_sectors() {
            Representation::Sector { max_n }
        } else {
            Representation::FullSpace
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Fehlberg 7(8), propagating the eighth-order solution.
    AdaptiveRkf78,
    /// Dormand–Prince 5(4).
    AdaptiveDp5,
    /// Classical RK4, step count doubled until two successive results agree.
    Rk4Richardson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Smallest step, relative to the duration, before the adaptive run gives up.
    pub min_step_fraction: f64,
    /// Retry with [`Method::Rk4Richardson`] if the adaptive run fails.
    pub fallback: bool,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            method: Method::AdaptiveRkf78,
            rtol: 1e-9,
            atol: 1e-12,
            max_steps: 2_000_000,
            min_step_fraction: 1e-12,
            fallback: true,
        }
    }
}

/// States up to this dimension have their positivity checked after every
/// accepted step; larger ones only at the end.
pub const STEPWISE_POSITIVITY_DIM: usize = 128;

/// Noisy chain evolution over a fixed duration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionJob {
    chain: ChainSpec,
    noise: NoiseSpec,
    representation: Representation,
    duration: f64,
    pub integrator: IntegratorSettings,
    coherent: bool,
    dissipative: bool,
}

impl EvolutionJob {
    /// Full space, duration τ.
    pub fn new(chain: ChainSpec, noise: NoiseSpec) -> Self {
        Self {
            duration: chain.inversion_time(),
            chain,
            noise,
            representation: Representation::FullSpace,
            integrator: IntegratorSettings::default(),
            coherent: true,
            dissipative: true,
        }
    }

    pub fn with_representation(mut self, representation: Representation) -> Result<Self> {
        if let Representation::Sector { max_n } = representation {
            if !self.noise.preserves_low_sectors() {
                return Err(EvolveError::Representation(format!(
                    "sector(max_n={max_n}) with excitation-raising noise (alpha = {})",
                    self.noise.alpha()
                )));
            }
        }
        self.representation = representation;
        Ok(self)
    }

    pub fn with_duration(mut self, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(EvolveError::Representation(format!("duration {duration}")));
        }
        self.duration = duration;
        Ok(self)
    }

    /// Switch the Hamiltonian and/or the dissipator off.
    pub fn with_parts(mut self, coherent: bool, dissipative: bool) -> Self {
        self.coherent = coherent;
        self.dissipative = dissipative;
        self
    }

    pub fn with_integrator(mut self, settings: IntegratorSettings) -> Self {
        self.integrator = settings;
        self
    }

    pub fn chain(&self) -> &ChainSpec {
        &self.chain
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    fn max_n(&self) -> usize {
        match self.representation {
            Representation::FullSpace => self.chain.n(),
            Representation::Sector { max_n } => max_n.min(self.chain.n()),
        }
    }

    /// Basis in which dense states of this job are expressed.
    pub fn basis(&self) -> Result<Basis> {
        Ok(match self.representation {
            Representation::FullSpace => Basis::full(self.chain.n()),
            Representation::Sector { max_n } => {
                Basis::Sectors(SectorBasis::up_to(self.chain.n(), max_n)?)
            }
        })
    }
}

/// Channel probe: which chain sites receive the input qubits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    input_sites: Vec<usize>,
}

impl ProbeConfig {
    pub fn new(input_sites: Vec<usize>, n_sites: usize) -> Result<Self> {
        if input_sites.is_empty() || input_sites.len() > 2 {
            return Err(EvolveError::InvalidProbe(format!(
                "arity {} not in 1..=2",
                input_sites.len()
            )));
        }
        for (k, &s) in input_sites.iter().enumerate() {
            if s == 0 || s > n_sites {
                return Err(EvolveError::InvalidProbe(format!(
                    "site {s} outside 1..={n_sites}"
                )));
            }
            if input_sites[..k].contains(&s) {
                return Err(EvolveError::InvalidProbe(format!("site {s} repeated")));
            }
        }
        Ok(Self { input_sites })
    }

    /// Site 1 for arity 1; sites 1 and N for arity 2.
    pub fn default_for(arity: usize, n_sites: usize) -> Result<Self> {
        match arity {
            1 => Self::new(vec![1], n_sites),
            2 => Self::new(vec![1, n_sites], n_sites),
            _ => Err(EvolveError::InvalidProbe(format!(
                "arity {arity} not in 1..=2"
            ))),
        }
    }

    pub fn arity(&self) -> usize {
        self.input_sites.len()
    }

    pub fn input_sites(&self) -> &[usize] {
        &self.input_sites
    }

    pub fn output_sites(&self, n_sites: usize) -> Vec<usize> {
        self.input_sites.iter().map(|&s| n_sites + 1 - s).collect()
    }
}

struct Csr {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

/// Precomputed sector data for one job.
struct Engine {
    n_sites: usize,
    max_n: usize,
    field: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    coherent: bool,
    dissipative: bool,
    states: Vec<Vec<u64>>,
    index: Vec<HashMap<u64, u32>>,
    hop: Vec<Csr>,
    /// `[n][site]`: pairs (a in sector n, a' in sector n+1) with a' = a plus an excitation at site.
    raise_pairs: Vec<Vec<Vec<(u32, u32)>>>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    n: usize,
    m: usize,
    rows: usize,
    cols: usize,
    offset: usize,
}

struct Layout {
    blocks: Vec<Block>,
    lookup: Vec<Option<usize>>,
    width: usize,
    len: usize,
}

impl Layout {
    fn block_at(&self, n: usize, m: usize) -> Option<&Block> {
        if n >= self.width || m >= self.width {
            return None;
        }
        self.lookup[n * self.width + m].map(|i| &self.blocks[i])
    }
}

impl Engine {
    fn new(job: &EvolutionJob) -> Result<Self> {
        let spec = &job.chain;
        let n_sites = spec.n();
        let max_n = job.max_n();
        let mut states = Vec::with_capacity(max_n + 1);
        let mut index = Vec::with_capacity(max_n + 1);
        let mut hop = Vec::with_capacity(max_n + 1);
        for k in 0..=max_n {
            let sb = SectorBasis::new(n_sites, &[k])?;
            let basis = Basis::Sectors(sb.clone());
            let mut elems = chain::hopping_elements(spec, &basis)?;
            elems.sort_by_key(|&(r, c, _)| (r, c));
            let dim = sb.dim();
            let mut ptr = vec![0usize; dim + 1];
            for &(r, _, _) in &elems {
                ptr[r + 1] += 1;
            }
            for r in 0..dim {
                ptr[r + 1] += ptr[r];
            }
            hop.push(Csr {
                ptr,
                idx: elems.iter().map(|e| e.1 as u32).collect(),
                val: elems.iter().map(|e| e.2).collect(),
            });
            index.push(
                sb.states()
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (s, i as u32))
                    .collect::<HashMap<_, _>>(),
            );
            states.push(sb.states().to_vec());
        }
        let mut raise_pairs = Vec::with_capacity(max_n + 1);
        for k in 0..=max_n {
            let mut per_site = Vec::with_capacity(n_sites);
            for site in 1..=n_sites {
                let mask = chain::site_mask(n_sites, site);
                let mut pairs = Vec::new();
                if k < max_n {
                    for (a, &s) in states[k].iter().enumerate() {
                        if s & mask == 0 {
                            pairs.push((a as u32, index[k + 1][&(s | mask)]));
                        }
                    }
                }
                per_site.push(pairs);
            }
            raise_pairs.push(per_site);
        }
        let noise = &job.noise;
        Ok(Self {
            n_sites,
            max_n,
            field: spec.field(),
            alpha: noise.alpha(),
            beta: noise.beta(),
            gamma: noise.gamma(),
            coherent: job.coherent,
            dissipative: job.dissipative,
            states,
            index,
            hop,
            raise_pairs,
        })
    }

    fn layout(&self, pairs: impl Iterator<Item = (usize, usize)>) -> Layout {
        let width = self.max_n + 1;
        let mut blocks = Vec::new();
        let mut lookup = vec![None; width * width];
        let mut offset = 0;
        for (n, m) in pairs {
            let rows = self.states[n].len();
            let cols = self.states[m].len();
            lookup[n * width + m] = Some(blocks.len());
            blocks.push(Block {
                n,
                m,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        Layout {
            blocks,
            lookup,
            width,
            len: offset,
        }
    }

    /// Blocks of charge `k = n − m`.
    fn charge_layout(&self, k: i64) -> Layout {
        let max = self.max_n as i64;
        self.layout(
            (0..=max)
                .filter(|&n| (0..=max).contains(&(n - k)))
                .map(|n| (n as usize, (n - k) as usize)),
        )
    }

    fn full_layout(&self) -> Layout {
        let w = self.max_n + 1;
        self.layout((0..w).flat_map(|n| (0..w).map(move |m| (n, m))))
    }

    /// Diagonal decay coefficients per stored element: anticommutator terms plus dephasing.
    fn diagonal(&self, layout: &Layout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len];
        if !self.dissipative {
            return out;
        }
        let nn = self.n_sites as f64;
        let d = |n: usize| 0.5 * (self.alpha * (nn - n as f64) + self.beta * n as f64);
        for blk in &layout.blocks {
            let base = d(blk.n) + d(blk.m);
            let rs = &self.states[blk.n];
            let cs = &self.states[blk.m];
            for a in 0..blk.rows {
                for b in 0..blk.cols {
                    out[blk.offset + a * blk.cols + b] =
                        base + self.gamma * (rs[a] ^ cs[b]).count_ones() as f64;
                }
            }
        }
        out
    }
}

/// Linear generator restricted to one block layout.
struct Generator<'a> {
    engine: &'a Engine,
    layout: Layout,
    diag: Vec<f64>,
    lab_frame: bool,
}

impl<'a> Generator<'a> {
    fn new(engine: &'a Engine, layout: Layout, lab_frame: bool) -> Self {
        let diag = engine.diagonal(&layout);
        Self {
            engine,
            layout,
            diag,
            lab_frame,
        }
    }

    fn apply(&self, y: &[C64], out: &mut [C64]) {
        let e = self.engine;
        let minus_i = C64::new(0.0, -1.0);
        for blk in &self.layout.blocks {
            let (rows, cols, off) = (blk.rows, blk.cols, blk.offset);
            let src = &y[off..off + rows * cols];
            let dst = &mut out[off..off + rows * cols];
            let diag = &self.diag[off..off + rows * cols];
            for ((d, s), g) in dst.iter_mut().zip(src).zip(diag) {
                *d = -*s * *g;
            }
            if e.coherent {
                let hr = &e.hop[blk.n];
                let hc = &e.hop[blk.m];
                for a in 0..rows {
                    let row = &mut dst[a * cols..(a + 1) * cols];
                    // −i H ρ
                    for p in hr.ptr[a]..hr.ptr[a + 1] {
                        let coef = minus_i * hr.val[p];
                        let other =
                            &src[hr.idx[p] as usize * cols..(hr.idx[p] as usize + 1) * cols];
                        for (r, o) in row.iter_mut().zip(other) {
                            *r += coef * *o;
                        }
                    }
                    // +i ρ H
                    let srow = &src[a * cols..(a + 1) * cols];
                    for (b, r) in row.iter_mut().enumerate() {
                        let mut acc = C64::new(0.0, 0.0);
                        for p in hc.ptr[b]..hc.ptr[b + 1] {
                            acc += srow[hc.idx[p] as usize] * hc.val[p];
                        }
                        *r += C64::new(-acc.im, acc.re);
                    }
                }
                if self.lab_frame {
                    let k = blk.n as f64 - blk.m as f64;
                    if k != 0.0 {
                        let coef = minus_i * (e.field * k);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += coef * *s;
                        }
                    }
                }
            }
            if e.dissipative {
                // β: excitation lost, fed from block (n+1, m+1)
                if e.beta > 0.0 {
                    if let Some(up) = self.layout.block_at(blk.n + 1, blk.m + 1) {
                        let s2 = &y[up.offset..up.offset + up.rows * up.cols];
                        for site in 0..e.n_sites {
                            let rp = &e.raise_pairs[blk.n][site];
                            let cp = &e.raise_pairs[blk.m][site];
                            for &(a, a2) in rp {
                                let drow = &mut dst[a as usize * cols..(a as usize + 1) * cols];
                                let srow = &s2[a2 as usize * up.cols..(a2 as usize + 1) * up.cols];
                                for &(b, b2) in cp {
                                    drow[b as usize] += srow[b2 as usize] * e.beta;
                                }
                            }
                        }
                    }
                }
                // α: excitation created, fed from block (n−1, m−1)
                if e.alpha > 0.0 && blk.n > 0 && blk.m > 0 {
                    if let Some(down) = self.layout.block_at(blk.n - 1, blk.m - 1) {
                        let s0 = &y[down.offset..down.offset + down.rows * down.cols];
                        for site in 0..e.n_sites {
                            let rp = &e.raise_pairs[blk.n - 1][site];
                            let cp = &e.raise_pairs[blk.m - 1][site];
                            for &(a0, a) in rp {
                                let drow = &mut dst[a as usize * cols..(a as usize + 1) * cols];
                                let srow =
                                    &s0[a0 as usize * down.cols..(a0 as usize + 1) * down.cols];
                                for &(b0, b) in cp {
                                    drow[b as usize] += srow[b0 as usize] * e.alpha;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Field phase accumulated over `t`, applied after a rotating-frame run.
    fn apply_field_phase(&self, y: &mut [C64], t: f64) {
        if !self.engine.coherent {
            return;
        }
        for blk in &self.layout.blocks {
            let k = blk.n as f64 - blk.m as f64;
            if k == 0.0 {
                continue;
            }
            let ph = C64::from_polar(1.0, -self.engine.field * k * t);
            for v in &mut y[blk.offset..blk.offset + blk.rows * blk.cols] {
                *v *= ph;
            }
        }
    }
}

/// Explicit embedded Runge–Kutta pair.
struct Tableau {
    a: Vec<Vec<f64>>,
    /// Weights of the propagated (higher-order) solution.
    b: Vec<f64>,
    /// Higher minus lower order weights.
    e: Vec<f64>,
    /// Order of the error estimate plus one, for the step-size exponent.
    q: f64,
    /// Last stage equals f at the new point.
    fsal: bool,
}

fn dormand_prince() -> Tableau {
    let a = vec![
        vec![],
        vec![1.0 / 5.0],
        vec![3.0 / 40.0, 9.0 / 40.0],
        vec![44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        vec![
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
        ],
        vec![
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        vec![
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    let b = vec![
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    let e = vec![
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    Tableau {
        a,
        b,
        e,
        q: 5.0,
        fsal: true,
    }
}

fn fehlberg78() -> Tableau {
    let mut a = vec![vec![0.0; 13]; 13];
    let mut set = |i: usize, entries: &[(usize, f64)]| {
        for &(j, v) in entries {
            a[i][j] = v;
        }
    };
    set(1, &[(0, 2.0 / 27.0)]);
    set(2, &[(0, 1.0 / 36.0), (1, 1.0 / 12.0)]);
    set(3, &[(0, 1.0 / 24.0), (2, 1.0 / 8.0)]);
    set(4, &[(0, 5.0 / 12.0), (2, -25.0 / 16.0), (3, 25.0 / 16.0)]);
    set(5, &[(0, 1.0 / 20.0), (3, 1.0 / 4.0), (4, 1.0 / 5.0)]);
    set(
        6,
        &[
            (0, -25.0 / 108.0),
            (3, 125.0 / 108.0),
            (4, -65.0 / 27.0),
            (5, 125.0 / 54.0),
        ],
    );
    set(
        7,
        &[
            (0, 31.0 / 300.0),
            (4, 61.0 / 225.0),
            (5, -2.0 / 9.0),
            (6, 13.0 / 900.0),
        ],
    );
    set(
        8,
        &[
            (0, 2.0),
            (3, -53.0 / 6.0),
            (4, 704.0 / 45.0),
            (5, -107.0 / 9.0),
            (6, 67.0 / 90.0),
            (7, 3.0),
        ],
    );
    set(
        9,
        &[
            (0, -91.0 / 108.0),
            (3, 23.0 / 108.0),
            (4, -976.0 / 135.0),
            (5, 311.0 / 54.0),
            (6, -19.0 / 60.0),
            (7, 17.0 / 6.0),
            (8, -1.0 / 12.0),
        ],
    );
    set(
        10,
        &[
            (0, 2383.0 / 4100.0),
            (3, -341.0 / 164.0),
            (4, 4496.0 / 1025.0),
            (5, -301.0 / 82.0),
            (6, 2133.0 / 4100.0),
            (7, 45.0 / 82.0),
            (8, 45.0 / 164.0),
            (9, 18.0 / 41.0),
        ],
    );
    set(
        11,
        &[
            (0, 3.0 / 205.0),
            (5, -6.0 / 41.0),
            (6, -3.0 / 205.0),
            (7, -3.0 / 41.0),
            (8, 3.0 / 41.0),
            (9, 6.0 / 41.0),
        ],
    );
    set(
        12,
        &[
            (0, -1777.0 / 4100.0),
            (3, -341.0 / 164.0),
            (4, 4496.0 / 1025.0),
            (5, -289.0 / 82.0),
            (6, 2193.0 / 4100.0),
            (7, 51.0 / 82.0),
            (8, 33.0 / 164.0),
            (9, 12.0 / 41.0),
            (11, 1.0),
        ],
    );
    let a = a
        .into_iter()
        .enumerate()
        .map(|(i, row)| row[..i].to_vec())
        .collect();
    let mut b = vec![0.0; 13];
    for (j, v) in [
        (5, 34.0 / 105.0),
        (6, 9.0 / 35.0),
        (7, 9.0 / 35.0),
        (8, 9.0 / 280.0),
        (9, 9.0 / 280.0),
        (11, 41.0 / 840.0),
        (12, 41.0 / 840.0),
    ] {
        b[j] = v;
    }
    let mut e = vec![0.0; 13];
    e[0] = -41.0 / 840.0;
    e[10] = -41.0 / 840.0;
    e[11] = 41.0 / 840.0;
    e[12] = 41.0 / 840.0;
    Tableau {
        a,
        b,
        e,
        q: 8.0,
        fsal: false,
    }
}

type StepHook<'h> = dyn FnMut(f64, &[C64]) -> Result<()> + 'h;

/// Largest component error relative to `atol + rtol·‖y‖∞`.
fn error_norm(err: &[C64], y0: &[C64], y1: &[C64], rtol: f64, atol: f64) -> f64 {
    let scale = y0.iter().chain(y1).map(|z| z.norm()).fold(0.0, f64::max);
    let sc = atol + rtol * scale;
    err.iter().map(|e| e.norm()).fold(0.0, f64::max) / sc
}

fn integrate_embedded(
    gen: &Generator,
    tab: &Tableau,
    y0: &[C64],
    t_end: f64,
    s: &IntegratorSettings,
    hook: &mut StepHook,
) -> Result<Vec<C64>> {
    let n = y0.len();
    let mut y = y0.to_vec();
    if t_end == 0.0 || n == 0 {
        return Ok(y);
    }
    let zero = C64::new(0.0, 0.0);
    let stages = tab.b.len();
    let mut k: Vec<Vec<C64>> = (0..stages).map(|_| vec![zero; n]).collect();
    let mut tmp = vec![zero; n];
    let mut ynew = vec![zero; n];
    let mut err = vec![zero; n];
    gen.apply(&y, &mut k[0]);

    let norm = |v: &[C64]| (v.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64).sqrt();
    let (d0, d1) = (norm(&y), norm(&k[0]));
    let mut h = if d0 > 1e-12 && d1 > 1e-12 {
        0.01 * d0 / d1
    } else {
        1e-3 * t_end
    };
    h = h.min(t_end);
    let h_min = s.min_step_fraction * t_end;
    let expo = -1.0 / tab.q;
    let mut t = 0.0;
    let mut steps = 0usize;
    while t < t_end {
        if steps >= s.max_steps || h < h_min {
            return Err(EvolveError::StepUnderflow { t_reached: t });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        for st in 1..stages {
            let row = &tab.a[st];
            tmp.copy_from_slice(&y);
            for (j, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    let ha = h * a;
                    for (t_i, k_i) in tmp.iter_mut().zip(&k[j]) {
                        *t_i += k_i * ha;
                    }
                }
            }
            gen.apply(&tmp, &mut k[st]);
        }
        ynew.copy_from_slice(&y);
        err.iter_mut().for_each(|e| *e = zero);
        for j in 0..stages {
            let (bj, ej) = (tab.b[j] * h, tab.e[j] * h);
            if bj != 0.0 {
                for (y_i, k_i) in ynew.iter_mut().zip(&k[j]) {
                    *y_i += k_i * bj;
                }
            }
            if ej != 0.0 {
                for (e_i, k_i) in err.iter_mut().zip(&k[j]) {
                    *e_i += k_i * ej;
                }
            }
        }
        let en = error_norm(&err, &y, &ynew, s.rtol, s.atol);
        steps += 1;
        if en <= 1.0 {
            t = if last { t_end } else { t + h };
            std::mem::swap(&mut y, &mut ynew);
            if tab.fsal {
                k.swap(0, stages - 1);
            } else {
                gen.apply(&y, &mut k[0]);
            }
            hook(t, &y)?;
            let fac = if en == 0.0 {
                5.0
            } else {
                (0.9 * en.powf(expo)).clamp(0.2, 5.0)
            };
            h *= fac;
        } else {
            h *= (0.9 * en.powf(expo)).clamp(0.2, 1.0);
        }
    }
    log::debug!("{steps} steps over {t_end}");
    Ok(y)
}

fn rk4_run(gen: &Generator, y0: &[C64], t_end: f64, steps: usize) -> Vec<C64> {
    let n = y0.len();
    let zero = C64::new(0.0, 0.0);
    let h = t_end / steps as f64;
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
    );
    for _ in 0..steps {
        gen.apply(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + k1[i] * (0.5 * h);
        }
        gen.apply(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + k2[i] * (0.5 * h);
        }
        gen.apply(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + k3[i] * h;
        }
        gen.apply(&tmp, &mut k4);
        for i in 0..n {
            y[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
        }
    }
    y
}

/// Fixed-step RK4, doubling the step count until the step-halved result
/// agrees with the previous one to within the tolerances (Richardson
/// estimate: difference / 15).
fn integrate_rk4_verified(
    gen: &Generator,
    y0: &[C64],
    t_end: f64,
    s: &IntegratorSettings,
) -> Result<Vec<C64>> {
    if t_end == 0.0 {
        return Ok(y0.to_vec());
    }
    let mut steps = 16usize;
    let mut coarse = rk4_run(gen, y0, t_end, steps);
    loop {
        if steps * 2 > s.max_steps {
            return Err(EvolveError::StepUnderflow { t_reached: 0.0 });
        }
        steps *= 2;
        let fine = rk4_run(gen, y0, t_end, steps);
        let diff: Vec<C64> = fine
            .iter()
            .zip(&coarse)
            .map(|(a, b)| (a - b) / 15.0)
            .collect();
        if error_norm(&diff, &coarse, &fine, s.rtol, s.atol) <= 1.0 {
            return Ok(fine);
        }
        coarse = fine;
    }
}

fn integrate(
    gen: &Generator,
    y0: &[C64],
    t_end: f64,
    s: &IntegratorSettings,
    hook: &mut StepHook,
) -> Result<Vec<C64>> {
    match s.method {
        Method::Rk4Richardson => {
            let y = integrate_rk4_verified(gen, y0, t_end, s)?;
            hook(t_end, &y)?;
            Ok(y)
        }
        Method::AdaptiveDp5 | Method::AdaptiveRkf78 => {
            let tab = if s.method == Method::AdaptiveDp5 {
                dormand_prince()
            } else {
                fehlberg78()
            };
            match integrate_embedded(gen, &tab, y0, t_end, s, hook) {
                Err(EvolveError::StepUnderflow { t_reached }) if s.fallback => {
                    log::warn!("adaptive integration stalled at t = {t_reached}; retrying with verified RK4");
                    let y = integrate_rk4_verified(gen, y0, t_end, s)?;
                    hook(t_end, &y)?;
                    Ok(y)
                }
                other => other,
            }
        }
    }
}

fn dense_to_blocks(engine: &Engine, layout: &Layout, basis: &Basis, m: &CMat) -> Vec<C64> {
    let mut y = vec![C64::new(0.0, 0.0); layout.len];
    let pos: Vec<(usize, usize)> = (0..basis.dim())
        .map(|i| {
            let s = basis.state(i);
            let n = s.count_ones() as usize;
            (n, engine.index[n][&s] as usize)
        })
        .collect();
    for j in 0..basis.dim() {
        for i in 0..basis.dim() {
            let v = m[(i, j)];
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            let (n, a) = pos[i];
            let (mm, b) = pos[j];
            let blk = layout.block_at(n, mm).expect("full layout");
            y[blk.offset + a * blk.cols + b] = v;
        }
    }
    y
}

fn blocks_to_dense(engine: &Engine, layout: &Layout, basis: &Basis, y: &[C64]) -> CMat {
    let d = basis.dim();
    let mut m = CMat::zeros(d, d);
    for blk in &layout.blocks {
        for a in 0..blk.rows {
            let i = basis
                .index_of(engine.states[blk.n][a])
                .expect("state in basis");
            for b in 0..blk.cols {
                let j = basis
                    .index_of(engine.states[blk.m][b])
                    .expect("state in basis");
                m[(i, j)] = y[blk.offset + a * blk.cols + b];
            }
        }
    }
    m
}

fn check_state(job: &EvolutionJob, rho: &DensityMatrix) -> Result<Basis> {
    let basis = job.basis()?;
    if rho.dim() != basis.dim() {
        return Err(EvolveError::StateMismatch {
            expected: basis.dim(),
            found: rho.dim(),
        });
    }
    Ok(basis)
}

/// dρ/dt in the laboratory frame, in the job's basis.
pub fn lindblad_rhs(job: &EvolutionJob, rho: &DensityMatrix) -> Result<CMat> {
    lindblad_rhs_operator(job, rho.matrix())
}

/// As [`lindblad_rhs`] for an arbitrary (not necessarily Hermitian) operator.
pub fn lindblad_rhs_operator(job: &EvolutionJob, op: &CMat) -> Result<CMat> {
    let basis = job.basis()?;
    if op.nrows() != basis.dim() || op.ncols() != basis.dim() {
        return Err(EvolveError::StateMismatch {
            expected: basis.dim(),
            found: op.nrows(),
        });
    }
    let engine = Engine::new(job)?;
    let gen = Generator::new(&engine, engine.full_layout(), true);
    let y = dense_to_blocks(&engine, &gen.layout, &basis, op);
    let mut out = vec![C64::new(0.0, 0.0); y.len()];
    gen.apply(&y, &mut out);
    Ok(blocks_to_dense(&engine, &gen.layout, &basis, &out))
}

/// Evolve a density matrix (in the job's basis) for the job's duration.
/// Trace and Hermiticity are checked after every accepted step, positivity
/// too when the dimension is at most [`STEPWISE_POSITIVITY_DIM`].
pub fn evolve_state(job: &EvolutionJob, rho0: &DensityMatrix) -> Result<DensityMatrix> {
    let basis = check_state(job, rho0)?;
    let engine = Engine::new(job)?;
    let gen = Generator::new(&engine, engine.full_layout(), false);
    let y0 = dense_to_blocks(&engine, &gen.layout, &basis, rho0.matrix());
    let dim = basis.dim();
    let mut hook = |t: f64, y: &[C64]| -> Result<()> {
        let mut tr = C64::new(0.0, 0.0);
        let mut herm: f64 = 0.0;
        for blk in &gen.layout.blocks {
            let mirror = gen.layout.block_at(blk.m, blk.n).expect("full layout");
            for a in 0..blk.rows {
                for b in 0..blk.cols {
                    let v = y[blk.offset + a * blk.cols + b];
                    let w = y[mirror.offset + b * mirror.cols + a];
                    herm = herm.max((v - w.conj()).norm());
                    if blk.n == blk.m && a == b {
                        tr += v;
                    }
                }
            }
        }
        if (tr - 1.0).norm() > 1e-9 {
            return Err(EvolveError::InvariantViolation {
                what: "trace deviation",
                value: (tr - 1.0).norm(),
                t,
            });
        }
        if herm > 1e-9 {
            return Err(EvolveError::InvariantViolation {
                what: "hermiticity deviation",
                value: herm,
                t,
            });
        }
        if dim <= STEPWISE_POSITIVITY_DIM {
            let min = numkit::min_eigenvalue(&blocks_to_dense(&engine, &gen.layout, &basis, y))?;
            if min < -1e-8 {
                return Err(EvolveError::InvariantViolation {
                    what: "min eigenvalue",
                    value: min,
                    t,
                });
            }
        }
        Ok(())
    };
    let mut y = integrate(&gen, &y0, job.duration, &job.integrator, &mut hook)?;
    gen.apply_field_phase(&mut y, job.duration);
    let m = blocks_to_dense(&engine, &gen.layout, &basis, &y);
    let min = numkit::min_eigenvalue(&numkit::hermitian_part(&m))?;
    if min < -1e-8 {
        return Err(EvolveError::InvariantViolation {
            what: "min eigenvalue",
            value: min,
            t: job.duration,
        });
    }
    Ok(DensityMatrix::with_tolerance(
        Operator::new(numkit::hermitian_part(&m), rho0.dims().to_vec())?,
        1e-9,
        1e-9,
        1e-8,
    )?)
}

/// Reduced operator on `out_sites` (logical order) of a block state.
fn reduce_to_sites(engine: &Engine, layout: &Layout, y: &[C64], out_sites: &[usize]) -> CMat {
    let q = out_sites.len();
    let masks: Vec<u64> = out_sites
        .iter()
        .map(|&s| chain::site_mask(engine.n_sites, s))
        .collect();
    let out_mask: u64 = masks.iter().fold(0, |acc, m| acc | m);
    let logical = |s: u64| -> usize {
        masks.iter().enumerate().fold(0, |acc, (k, &m)| {
            if s & m != 0 {
                acc | 1 << (q - 1 - k)
            } else {
                acc
            }
        })
    };
    let keyed: Vec<Vec<(u64, usize)>> = engine
        .states
        .iter()
        .map(|st| st.iter().map(|&s| (s & !out_mask, logical(s))).collect())
        .collect();
    let d = 1usize << q;
    let mut r = CMat::zeros(d, d);
    for blk in &layout.blocks {
        let rk = &keyed[blk.n];
        let ck = &keyed[blk.m];
        // Group columns by their environment configuration.
        let mut by_rest: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
        for (b, &(rest, x)) in ck.iter().enumerate() {
            by_rest.entry(rest).or_default().push((b, x));
        }
        for (a, &(rest, x)) in rk.iter().enumerate() {
            if let Some(cols) = by_rest.get(&rest) {
                for &(b, xb) in cols {
                    r[(x, xb)] += y[blk.offset + a * blk.cols + b];
                }
            }
        }
    }
    r
}

/// Image of the basis operator |p⟩⟨q| on the probe sites, read at the mirror sites.
fn evolve_basis_operator(
    job: &EvolutionJob,
    engine: &Engine,
    probe: &ProbeConfig,
    p: usize,
    q: usize,
) -> Result<CMat> {
    let n = job.chain.n();
    let sp = chain::place_bits(n, probe.input_sites(), p);
    let sq = chain::place_bits(n, probe.input_sites(), q);
    let (np, nq) = (sp.count_ones() as usize, sq.count_ones() as usize);
    let gen = Generator::new(engine, engine.charge_layout(np as i64 - nq as i64), false);
    let mut y0 = vec![C64::new(0.0, 0.0); gen.layout.len];
    let blk = gen
        .layout
        .block_at(np, nq)
        .expect("input inside representation");
    let a = engine.index[np][&sp] as usize;
    let b = engine.index[nq][&sq] as usize;
    y0[blk.offset + a * blk.cols + b] = C64::new(1.0, 0.0);
    let mut y = integrate(&gen, &y0, job.duration, &job.integrator, &mut |_, _| Ok(()))?;
    gen.apply_field_phase(&mut y, job.duration);
    Ok(reduce_to_sites(
        engine,
        &gen.layout,
        &y,
        &probe.output_sites(n),
    ))
}

/// Images of |p⟩⟨q| under closed evolution, from the exact propagator on
/// the sectors the probe can reach.
fn unitary_images(
    job: &EvolutionJob,
    probe: &ProbeConfig,
    pairs: &[(usize, usize)],
) -> Result<Vec<CMat>> {
    let n = job.chain.n();
    let basis = Basis::Sectors(SectorBasis::up_to(n, probe.arity())?);
    let u = chain::propagator(&job.chain, &basis, job.duration)?;
    let inputs = probe.input_sites();
    let outputs = probe.output_sites(n);
    let out_mask: u64 = outputs.iter().map(|&s| chain::site_mask(n, s)).sum();
    let local = |bits: u64| -> usize {
        outputs.iter().fold(0, |acc, &s| {
            acc << 1 | usize::from(bits & chain::site_mask(n, s) != 0)
        })
    };
    let column = |x: usize| -> Result<Vec<C64>> {
        let bits = chain::place_bits(n, inputs, x);
        let k = basis
            .index_of(bits)
            .ok_or_else(|| EvolveError::Representation(format!("input {bits:b} outside basis")))?;
        Ok(u.column(k).iter().copied().collect())
    };
    let d = 1usize << probe.arity();
    let cols: Vec<Vec<C64>> = (0..d).map(column).collect::<Result<_>>()?;
    // environment configuration → (output index, basis index)
    let mut env: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
    for i in 0..basis.dim() {
        let bits = basis.state(i);
        env.entry(bits & !out_mask)
            .or_default()
            .push((local(bits), i));
    }
    Ok(pairs
        .iter()
        .map(|&(p, q)| {
            let mut img = CMat::zeros(d, d);
            for group in env.values() {
                for &(o, i) in group {
                    for &(o2, j) in group {
                        img[(o, o2)] += cols[p][i] * cols[q][j].conj();
                    }
                }
            }
            img
        })
        .collect())
}

/// Choi state of the accumulated channel from the probe sites to their
/// mirror sites, built by evolving the operator basis |p⟩⟨q| (p ≤ q; the
/// rest follow by Hermitian conjugation) with all other spins in |0⟩.
/// Closed evolution uses the exact propagator instead of the integrator.
pub fn extract_channel(job: &EvolutionJob, probe: &ProbeConfig) -> Result<ChoiState> {
    let n = job.chain.n();
    ProbeConfig::new(probe.input_sites().to_vec(), n)?;
    if job.max_n() < probe.arity() {
        return Err(EvolveError::Representation(format!(
            "sector(max_n={}) cannot hold {} probe excitations",
            job.max_n(),
            probe.arity()
        )));
    }
    let d = 1usize << probe.arity();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|p| (p..d).map(move |q| (p, q))).collect();
    let images: Vec<CMat> = if job.coherent && (job.noise.is_noiseless() || !job.dissipative) {
        unitary_images(job, probe, &pairs)?
    } else {
        let engine = Engine::new(job)?;
        pairs
            .par_iter()
            .map(|&(p, q)| evolve_basis_operator(job, &engine, probe, p, q))
            .collect::<Result<Vec<_>>>()?
    };
    let mut std = CMat::zeros(d * d, d * d);
    let scale = 1.0 / d as f64;
    for (&(p, q), img) in pairs.iter().zip(&images) {
        for o in 0..d {
            for o2 in 0..d {
                let v = img[(o, o2)] * scale;
                std[(p * d + o, q * d + o2)] = v;
                if p != q {
                    std[(q * d + o2, p * d + o)] = v.conj();
                }
            }
        }
    }
    let std = numkit::hermitian_part(&std);
    Ok(ChoiState::from_standard(probe.arity(), std)?)
}

/// Λ(ρ) from the Choi state: `Λ(ρ)_{ij} = d Σ_{kl} ρ_{kl} C_{(k,i),(l,j)}`
/// with C in (input ⊗ output) order.
pub fn apply_channel(choi: &ChoiState, rho_in: &DensityMatrix) -> Result<DensityMatrix> {
    let out = apply_channel_operator(choi, rho_in.matrix())?;
    Ok(DensityMatrix::with_tolerance(
        Operator::new(numkit::hermitian_part(&out), vec![2; choi.arity()])?,
        1e-8,
        1e-8,
        1e-8,
    )?)
}

/// Channel action on an arbitrary operator.
pub fn apply_channel_operator(choi: &ChoiState, op: &CMat) -> Result<CMat> {
    let d = choi.channel_dim();
    if op.nrows() != d || op.ncols() != d {
        return Err(NumkitError::DimensionMismatch {
            expected: d,
            found: op.nrows(),
        }
        .into());
    }
    let c = choi.standard_matrix();
    let mut out = CMat::zeros(d, d);
    for k in 0..d {
        for l in 0..d {
            let w = op[(k, l)];
            if w == C64::new(0.0, 0.0) {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    out[(i, j)] += w * c[(k * d + i, l * d + j)];
                }
            }
        }
    }
    Ok(out * C64::new(d as f64, 0.0))
}

/// Kraus operators from the spectral decomposition of the Choi matrix;
/// eigenvalues below 1e-10 are dropped.
pub fn choi_to_kraus(choi: &ChoiState) -> Result<KrausSet> {
    let d = choi.channel_dim();
    let (vals, vecs) = numkit::hermitian_eigen(&choi.standard_matrix())?;
    if let Some(&min) = vals.first() {
        if min < -1e-8 {
            return Err(NumkitError::NotPositive {
                min_eigenvalue: min,
            }
            .into());
        }
    }
    let mut ops = Vec::new();
    for (k, &lam) in vals.iter().enumerate().rev() {
        if lam < 1e-10 {
            continue;
        }
        let w = (d as f64 * lam).sqrt();
        let mut e = CMat::zeros(d, d);
        for i in 0..d {
            for o in 0..d {
                e[(o, i)] = vecs[(i * d + o, k)] * w;
            }
        }
        ops.push(e);
    }
    Ok(KrausSet::with_tolerance(ops, 1e-7)?)
}
