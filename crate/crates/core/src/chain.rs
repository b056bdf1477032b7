//! The engineered mirror-inverting XX chain.
//!
//! Sites are numbered 1..=N. A computational basis state is a bit string
//! stored in a `u64` with site 1 in the most significant used position
//! (bit N-1) and site N in bit 0. Bit value 1 marks a down spin, i.e. one
//! excitation; the all-zero string is the vacuum.

use std::collections::HashMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::numkit::{self, CMat, NumkitError, C64};

/// Largest chain length representable by the `u64` bit strings.
pub const MAX_SITES: usize = 63;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("invalid chain parameter {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("basis is for {found} sites but the chain has {expected}")]
    BasisMismatch { expected: usize, found: usize },
    #[error("invalid site selection: {0}")]
    InvalidSites(String),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

pub type Result<T> = std::result::Result<T, ChainError>;

/// Chain of `n` spins with couplings `J t_j`, `t_j = ½√(j(N−j))`, and a
/// uniform field `h = S J + Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSpec {
    n: usize,
    j: f64,
    delta_over_j: f64,
}

impl ChainSpec {
    pub const DEFAULT_DELTA_OVER_J: f64 = 2.0;

    pub fn new(n: usize, j: f64, delta_over_j: f64) -> Result<Self> {
        if n == 0 || n > MAX_SITES {
            return Err(ChainError::InvalidSpec {
                field: "N",
                reason: format!("{n} not in 1..={MAX_SITES}"),
            });
        }
        if !(j > 0.0 && j.is_finite()) {
            return Err(ChainError::InvalidSpec {
                field: "J",
                reason: format!("{j} must be positive"),
            });
        }
        if !(delta_over_j > 0.0 && delta_over_j.is_finite()) {
            return Err(ChainError::InvalidSpec {
                field: "delta_over_J",
                reason: format!("{delta_over_j} must be positive"),
            });
        }
        let spec = Self { n, j, delta_over_j };
        if !spec.is_phase_free() {
            log::warn!("delta_over_J = {delta_over_j} is not an even integer; inversion carries extra phases");
        }
        Ok(spec)
    }

    /// J = 1 and Δ/J = 2.
    pub fn standard(n: usize) -> Result<Self> {
        Self::new(n, 1.0, Self::DEFAULT_DELTA_OVER_J)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn j(&self) -> f64 {
        self.j
    }

    pub fn delta_over_j(&self) -> f64 {
        self.delta_over_j
    }

    pub fn delta(&self) -> f64 {
        self.delta_over_j * self.j
    }

    /// Dimensionless coupling t_j for bond (j, j+1), j in 1..N.
    pub fn coupling(&self, bond: usize) -> f64 {
        assert!(bond >= 1 && bond < self.n, "bond {bond} out of range");
        0.5 * ((bond * (self.n - bond)) as f64).sqrt()
    }

    pub fn couplings(&self) -> Vec<f64> {
        (1..self.n).map(|b| self.coupling(b)).collect()
    }

    pub fn pseudo_spin(&self) -> f64 {
        (self.n as f64 - 1.0) / 2.0
    }

    pub fn field(&self) -> f64 {
        self.pseudo_spin() * self.j + self.delta()
    }

    pub fn inversion_time(&self) -> f64 {
        std::f64::consts::PI / self.j
    }

    pub fn is_phase_free(&self) -> bool {
        let r = self.delta_over_j.round();
        (self.delta_over_j - r).abs() < 1e-12 && (r as i64) % 2 == 0
    }

    pub fn mirror_site(&self, site: usize) -> usize {
        self.n + 1 - site
    }

    /// Bit mask of a 1-based site.
    pub fn site_mask(&self, site: usize) -> u64 {
        site_mask(self.n, site)
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        Self::new(n, self.j, self.delta_over_j)
    }
}

pub fn site_mask(n: usize, site: usize) -> u64 {
    1u64 << (n - site)
}

/// Reverse the site order of a bit string.
pub fn mirror_bits(n: usize, bits: u64) -> u64 {
    let mut out = 0u64;
    for k in 0..n {
        if bits >> k & 1 == 1 {
            out |= 1 << (n - 1 - k);
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r as usize
}

/// Enumerate all `n`-site strings with exactly `k` excitations in ascending
/// integer order (lexicographic with site 1 most significant).
pub fn sector_states(n: usize, k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(binomial(n, k));
    if k > n {
        return out;
    }
    if k == 0 {
        out.push(0);
        return out;
    }
    let mut v: u64 = (1u64 << k) - 1;
    let limit = 1u64 << n;
    while v < limit {
        out.push(v);
        // Gosper's hack: next integer with the same popcount
        let c = v & v.wrapping_neg();
        let r = v + c;
        v = (((r ^ v) >> 2) / c) | r;
    }
    out
}

/// Excitation-number sectors of an `n`-site chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorBasis {
    n_sites: usize,
    sectors: Vec<usize>,
    states: Vec<u64>,
    offsets: Vec<usize>,
    index: HashMap<u64, usize>,
}

impl SectorBasis {
    pub fn new(n_sites: usize, sectors: &[usize]) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(ChainError::InvalidSpec {
                field: "N",
                reason: format!("{n_sites} not in 1..={MAX_SITES}"),
            });
        }
        let mut sectors = sectors.to_vec();
        sectors.sort_unstable();
        sectors.dedup();
        if sectors.is_empty() || *sectors.last().unwrap() > n_sites {
            return Err(ChainError::InvalidSpec {
                field: "sectors",
                reason: format!("{sectors:?} for N={n_sites}"),
            });
        }
        let mut states = Vec::new();
        let mut offsets = Vec::with_capacity(sectors.len() + 1);
        for &k in &sectors {
            offsets.push(states.len());
            states.extend(sector_states(n_sites, k));
        }
        offsets.push(states.len());
        let index = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Ok(Self {
            n_sites,
            sectors,
            states,
            offsets,
            index,
        })
    }

    /// Sectors 0..=max_n.
    pub fn up_to(n_sites: usize, max_n: usize) -> Result<Self> {
        let sectors: Vec<usize> = (0..=max_n.min(n_sites)).collect();
        Self::new(n_sites, &sectors)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn sectors(&self) -> &[usize] {
        &self.sectors
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> u64 {
        self.states[i]
    }

    pub fn index_of(&self, bits: u64) -> Option<usize> {
        self.index.get(&bits).copied()
    }

    /// Basis index range of sector `k`, if included.
    pub fn sector_range(&self, k: usize) -> Option<std::ops::Range<usize>> {
        let pos = self.sectors.iter().position(|&s| s == k)?;
        Some(self.offsets[pos]..self.offsets[pos + 1])
    }
}

/// Either the full 2^N space in integer order or a set of excitation sectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Full { n_sites: usize },
    Sectors(SectorBasis),
}

impl Basis {
    pub fn full(n_sites: usize) -> Self {
        Basis::Full { n_sites }
    }

    pub fn n_sites(&self) -> usize {
        match self {
            Basis::Full { n_sites } => *n_sites,
            Basis::Sectors(b) => b.n_sites(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Basis::Full { n_sites } => 1usize << n_sites,
            Basis::Sectors(b) => b.dim(),
        }
    }

    pub fn state(&self, i: usize) -> u64 {
        match self {
            Basis::Full { .. } => i as u64,
            Basis::Sectors(b) => b.state(i),
        }
    }

    pub fn index_of(&self, bits: u64) -> Option<usize> {
        match self {
            Basis::Full { n_sites } => ((bits >> n_sites) == 0).then_some(bits as usize),
            Basis::Sectors(b) => b.index_of(bits),
        }
    }

    /// Basis indices grouped by excitation number, ascending.
    pub fn sector_groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..self.dim() {
            map.entry(self.state(i).count_ones() as usize)
                .or_default()
                .push(i);
        }
        map.into_iter().collect()
    }

    fn check(&self, spec: &ChainSpec) -> Result<()> {
        if self.n_sites() != spec.n() {
            return Err(ChainError::BasisMismatch {
                expected: spec.n(),
                found: self.n_sites(),
            });
        }
        if matches!(self, Basis::Full { .. }) && spec.n() > 20 {
            return Err(ChainError::InvalidSpec {
                field: "N",
                reason: "full space limited to N <= 20".into(),
            });
        }
        Ok(())
    }
}

/// Nonzero hopping elements `(row, col, value)` of the XX part of H within
/// the basis, both orderings included. The field term is diagonal and
/// equals `field * popcount`.
pub fn hopping_elements(spec: &ChainSpec, basis: &Basis) -> Result<Vec<(usize, usize, f64)>> {
    basis.check(spec)?;
    let n = spec.n();
    let mut out = Vec::new();
    for col in 0..basis.dim() {
        let s = basis.state(col);
        for bond in 1..n {
            let a = site_mask(n, bond);
            let b = site_mask(n, bond + 1);
            let pair = s & (a | b);
            if pair == a || pair == b {
                let flipped = s ^ (a | b);
                if let Some(row) = basis.index_of(flipped) {
                    out.push((row, col, -spec.j() * spec.coupling(bond)));
                }
            }
        }
    }
    Ok(out)
}

/// Dense matrix of H_S in the given basis.
pub fn build_hamiltonian(spec: &ChainSpec, basis: &Basis) -> Result<CMat> {
    let elems = hopping_elements(spec, basis)?;
    let d = basis.dim();
    let mut h = CMat::zeros(d, d);
    for (r, c, v) in elems {
        h[(r, c)] += C64::new(v, 0.0);
    }
    let field = spec.field();
    for i in 0..d {
        h[(i, i)] += C64::new(field * basis.state(i).count_ones() as f64, 0.0);
    }
    Ok(h)
}

/// exp(−i H t) built sector by sector from the spectral decomposition.
pub fn propagator(spec: &ChainSpec, basis: &Basis, t: f64) -> Result<CMat> {
    let h = build_hamiltonian(spec, basis)?;
    let d = basis.dim();
    let mut u = CMat::zeros(d, d);
    for (_, idx) in basis.sector_groups() {
        let m = idx.len();
        let block = DMatrix::from_fn(m, m, |r, c| h[(idx[r], idx[c])]);
        let ub = numkit::hermitian_function(&block, |e| C64::from_polar(1.0, -e * t))?;
        for r in 0..m {
            for c in 0..m {
                u[(idx[r], idx[c])] = ub[(r, c)];
            }
        }
    }
    Ok(u)
}

/// exp(−i H τ) with τ = π/J.
pub fn mirror_unitary(spec: &ChainSpec, basis: &Basis) -> Result<CMat> {
    propagator(spec, basis, spec.inversion_time())
}

fn check_sites(spec: &ChainSpec, sites: &[usize]) -> Result<()> {
    for (k, &s) in sites.iter().enumerate() {
        if s == 0 || s > spec.n() {
            return Err(ChainError::InvalidSites(format!(
                "site {s} outside 1..={}",
                spec.n()
            )));
        }
        if sites[..k].contains(&s) {
            return Err(ChainError::InvalidSites(format!("site {s} repeated")));
        }
    }
    Ok(())
}

/// Phase acquired by one excitation during the inversion, beyond the
/// mirror-relabelling; equals 1 when Δ/J is even.
pub fn single_excitation_phase(spec: &ChainSpec) -> C64 {
    C64::from_polar(1.0, -std::f64::consts::PI * spec.delta_over_j())
}

/// The inversion restricted to qubits placed at `sites` (all other spins in
/// |0⟩), as a 2^q × 2^q unitary in logical order: logical qubit k enters at
/// `sites[k]` and leaves at its mirror site. The result is diagonal, a
/// controlled-phase on every pair times the single-excitation phase per
/// excitation; the vacuum amplitude is +1.
pub fn ideal_circuit(spec: &ChainSpec, sites: &[usize]) -> Result<CMat> {
    check_sites(spec, sites)?;
    let q = sites.len();
    let phi = single_excitation_phase(spec);
    let d = 1usize << q;
    let mut u = CMat::zeros(d, d);
    for x in 0..d {
        let n = x.count_ones() as i32;
        let sign = if (n * (n - 1) / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        u[(x, x)] = phi.powi(n) * sign;
    }
    Ok(u)
}

/// Chain basis string with logical bits `x` (qubit 0 most significant) placed on `sites`.
pub fn place_bits(n: usize, sites: &[usize], x: usize) -> u64 {
    let q = sites.len();
    let mut bits = 0u64;
    for (k, &s) in sites.iter().enumerate() {
        if x >> (q - 1 - k) & 1 == 1 {
            bits |= site_mask(n, s);
        }
    }
    bits
}

/// The same logical unitary as [`ideal_circuit`], read off the full chain propagator.
pub fn mirror_unitary_restricted(spec: &ChainSpec, sites: &[usize]) -> Result<CMat> {
    check_sites(spec, sites)?;
    let q = sites.len();
    let basis = Basis::Sectors(SectorBasis::up_to(spec.n(), q)?);
    let u = mirror_unitary(spec, &basis)?;
    let out_sites: Vec<usize> = sites.iter().map(|&s| spec.mirror_site(s)).collect();
    let d = 1usize << q;
    let mut r = CMat::zeros(d, d);
    for x in 0..d {
        let col = basis
            .index_of(place_bits(spec.n(), sites, x))
            .expect("state in basis");
        for y in 0..d {
            let row = basis
                .index_of(place_bits(spec.n(), &out_sites, y))
                .expect("state in basis");
            r[(y, x)] = u[(row, col)];
        }
    }
    Ok(r)
}

/// Single-excitation amplitudes c_j(t) for an excitation starting at site 1.
pub fn single_particle_amplitudes(spec: &ChainSpec, t: f64) -> Result<Vec<C64>> {
    let basis = Basis::Sectors(SectorBasis::new(spec.n(), &[1])?);
    let u = propagator(spec, &basis, t)?;
    let start = basis.index_of(spec.site_mask(1)).expect("site 1 in basis");
    Ok((1..=spec.n())
        .map(|site| u[(basis.index_of(spec.site_mask(site)).unwrap(), start)])
        .collect())
}

/// |c_j(t)|² over sites 1..=N for an excitation injected at site 1.
pub fn single_particle_packet(spec: &ChainSpec, t: f64) -> Result<Vec<f64>> {
    let amps = single_particle_amplitudes(spec, t)?;
    let probs: Vec<f64> = amps.iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = probs.iter().sum();
    Ok(probs.into_iter().map(|p| p / total).collect())
}
