//! Dense complex linear algebra and quantum-state primitives.
//!
//! All matrices are `nalgebra::DMatrix<Complex64>`, which is column-major.
//! Multi-factor operators carry their factor dimensions in `dims`; the first
//! factor is the slowest-varying index of the Kronecker product, so basis
//! index `i = sum_f digit_f * stride_f` with the last factor having stride 1.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Entrywise Hermiticity tolerance for density matrices.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Unit-trace tolerance for density matrices.
pub const TRACE_TOL: f64 = 1e-9;
/// Largest negative eigenvalue accepted (and clipped) for positive operators.
pub const POSITIVITY_TOL: f64 = 1e-9;
/// Hermiticity tolerance accepted by the eigensolver entry points.
pub const EIGEN_HERMITIAN_TOL: f64 = 1e-8;
/// Trace-preservation marginal tolerance for Choi states.
pub const CHOI_TP_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumkitError {
    #[error("operator is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("factor index {index} out of range for {factors} factors")]
    InvalidFactor { index: usize, factors: usize },
    #[error("factor set must not be empty")]
    EmptyFactorSet,
    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("trace {trace} differs from 1")]
    TraceNotUnit { trace: f64 },
    #[error("operator is not positive (min eigenvalue {min_eigenvalue:e})")]
    NotPositive { min_eigenvalue: f64 },
    #[error("Kraus operators are not complete (max deviation {deviation:e})")]
    IncompleteKraus { deviation: f64 },
    #[error("Choi state is not trace preserving (marginal deviation {deviation:e})")]
    NotTracePreserving { deviation: f64 },
    #[error("unsupported channel arity {0}")]
    UnsupportedArity(usize),
}

pub type Result<T> = std::result::Result<T, NumkitError>;

/// A square operator on a tensor-product space.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    dims: Vec<usize>,
    mat: CMat,
}

impl Operator {
    pub fn new(mat: CMat, dims: Vec<usize>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(NumkitError::NotSquare {
                rows: mat.nrows(),
                cols: mat.ncols(),
            });
        }
        let total: usize = dims.iter().product();
        if total != mat.nrows() {
            return Err(NumkitError::DimensionMismatch {
                expected: total,
                found: mat.nrows(),
            });
        }
        Ok(Self { dims, mat })
    }

    /// Single-factor operator.
    pub fn single(mat: CMat) -> Result<Self> {
        let d = mat.nrows();
        Self::new(mat, vec![d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn trace(&self) -> C64 {
        self.mat.trace()
    }

    pub fn partial_trace(&self, keep: &[usize]) -> Result<Operator> {
        partial_trace(self, keep)
    }

    pub fn partial_transpose(&self, factors: &[usize]) -> Result<Operator> {
        partial_transpose(self, factors)
    }
}

/// Max entrywise |A - A^dagger|.
pub fn hermitian_deviation(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

/// (A + A^dagger) / 2
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Kronecker product with `a` as the slower-varying factor.
pub fn tensor_product(a: &Operator, b: &Operator) -> Operator {
    let mat = a.mat.kronecker(&b.mat);
    let mut dims = a.dims.clone();
    dims.extend_from_slice(&b.dims);
    Operator { dims, mat }
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for f in (0..dims.len().saturating_sub(1)).rev() {
        s[f] = s[f + 1] * dims[f + 1];
    }
    s
}

fn digits(mut index: usize, dims: &[usize], out: &mut [usize]) {
    for f in (0..dims.len()).rev() {
        out[f] = index % dims[f];
        index /= dims[f];
    }
}

fn check_factors(factors: &[usize], count: usize) -> Result<Vec<usize>> {
    if factors.is_empty() {
        return Err(NumkitError::EmptyFactorSet);
    }
    for &f in factors {
        if f >= count {
            return Err(NumkitError::InvalidFactor {
                index: f,
                factors: count,
            });
        }
    }
    let mut sorted = factors.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted)
}

/// Trace out every factor not in `keep`. Kept factors stay in ascending order.
pub fn partial_trace(op: &Operator, keep: &[usize]) -> Result<Operator> {
    let keep = check_factors(keep, op.dims.len())?;
    let dims = &op.dims;
    let kept_dims: Vec<usize> = keep.iter().map(|&f| dims[f]).collect();
    let traced: Vec<usize> = (0..dims.len()).filter(|f| !keep.contains(f)).collect();
    let traced_dims: Vec<usize> = traced.iter().map(|&f| dims[f]).collect();
    let kept_strides = strides(&kept_dims);
    let traced_strides = strides(&traced_dims);

    let total = op.dim();
    let n_traced: usize = traced_dims.iter().product();
    let n_kept: usize = kept_dims.iter().product();
    // Group full indices by their traced multi-index.
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_traced];
    let mut dg = vec![0; dims.len()];
    for i in 0..total {
        digits(i, dims, &mut dg);
        let k: usize = keep
            .iter()
            .zip(&kept_strides)
            .map(|(&f, s)| dg[f] * s)
            .sum();
        let t: usize = traced
            .iter()
            .zip(&traced_strides)
            .map(|(&f, s)| dg[f] * s)
            .sum();
        groups[t].push((k, i));
    }
    let mut out = CMat::zeros(n_kept, n_kept);
    for group in &groups {
        for &(ka, ia) in group {
            for &(kb, ib) in group {
                out[(ka, kb)] += op.mat[(ia, ib)];
            }
        }
    }
    Operator::new(out, kept_dims)
}

/// Transpose the indices of the named factors.
pub fn partial_transpose(op: &Operator, factors: &[usize]) -> Result<Operator> {
    let factors = check_factors(factors, op.dims.len())?;
    let dims = &op.dims;
    let st = strides(dims);
    let n = op.dim();
    let mut out = CMat::zeros(n, n);
    let mut di = vec![0; dims.len()];
    let mut dj = vec![0; dims.len()];
    for i in 0..n {
        digits(i, dims, &mut di);
        for j in 0..n {
            digits(j, dims, &mut dj);
            let mut ii = i;
            let mut jj = j;
            for &f in &factors {
                ii = ii - di[f] * st[f] + dj[f] * st[f];
                jj = jj - dj[f] * st[f] + di[f] * st[f];
            }
            out[(ii, jj)] = op.mat[(i, j)];
        }
    }
    Operator::new(out, dims.clone())
}

/// Reorder tensor factors: factor `perm[k]` of the input becomes factor `k`.
pub fn permute_factors(op: &Operator, perm: &[usize]) -> Result<Operator> {
    let nf = op.dims.len();
    let mut seen = vec![false; nf];
    if perm.len() != nf {
        return Err(NumkitError::DimensionMismatch {
            expected: nf,
            found: perm.len(),
        });
    }
    for &p in perm {
        if p >= nf || seen[p] {
            return Err(NumkitError::InvalidFactor {
                index: p,
                factors: nf,
            });
        }
        seen[p] = true;
    }
    let new_dims: Vec<usize> = perm.iter().map(|&p| op.dims[p]).collect();
    let new_strides = strides(&new_dims);
    let n = op.dim();
    let mut map = vec![0usize; n];
    let mut dg = vec![0; nf];
    for (i, m) in map.iter_mut().enumerate() {
        digits(i, &op.dims, &mut dg);
        *m = perm.iter().zip(&new_strides).map(|(&p, s)| dg[p] * s).sum();
    }
    let mut out = CMat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            out[(map[i], map[j])] = op.mat[(i, j)];
        }
    }
    Operator::new(out, new_dims)
}

/// Spectral decomposition of a Hermitian matrix: ascending eigenvalues and
/// the matching orthonormal eigenvectors as columns.
pub fn hermitian_eigen(h: &CMat) -> Result<(Vec<f64>, CMat)> {
    if h.nrows() != h.ncols() {
        return Err(NumkitError::NotSquare {
            rows: h.nrows(),
            cols: h.ncols(),
        });
    }
    let dev = hermitian_deviation(h);
    if dev > EIGEN_HERMITIAN_TOL {
        return Err(NumkitError::NotHermitian { deviation: dev });
    }
    let eig = SymmetricEigen::new(hermitian_part(h));
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(h.nrows(), h.nrows());
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    Ok((values, vectors))
}

pub fn eigenvalues(h: &CMat) -> Result<Vec<f64>> {
    Ok(hermitian_eigen(h)?.0)
}

pub fn min_eigenvalue(h: &CMat) -> Result<f64> {
    let vals = eigenvalues(h)?;
    Ok(vals.first().copied().unwrap_or(0.0))
}

/// Apply a real function to the spectrum of a Hermitian matrix.
pub fn hermitian_function(h: &CMat, f: impl Fn(f64) -> C64) -> Result<CMat> {
    let (vals, vecs) = hermitian_eigen(h)?;
    let mut scaled = vecs.clone();
    for (k, &v) in vals.iter().enumerate() {
        let fv = f(v);
        for i in 0..scaled.nrows() {
            scaled[(i, k)] *= fv;
        }
    }
    Ok(&scaled * vecs.adjoint())
}

/// Square root of a positive semidefinite matrix. Eigenvalues in
/// `[-POSITIVITY_TOL, 0)` are clipped to zero; anything more negative fails.
pub fn psd_sqrt(m: &CMat) -> Result<CMat> {
    let (vals, _) = hermitian_eigen(m)?;
    if let Some(&min) = vals.first() {
        if min < -POSITIVITY_TOL {
            return Err(NumkitError::NotPositive {
                min_eigenvalue: min,
            });
        }
    }
    hermitian_function(m, |v| C64::new(v.max(0.0).sqrt(), 0.0))
}

/// Uhlmann fidelity tr sqrt(sqrt(rho) sigma sqrt(rho)) (root convention).
pub fn uhlmann_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    uhlmann_fidelity_matrices(rho.matrix(), sigma.matrix())
}

pub fn uhlmann_fidelity_matrices(rho: &CMat, sigma: &CMat) -> Result<f64> {
    if rho.nrows() != sigma.nrows() {
        return Err(NumkitError::DimensionMismatch {
            expected: rho.nrows(),
            found: sigma.nrows(),
        });
    }
    let min_sigma = min_eigenvalue(sigma)?;
    if min_sigma < -POSITIVITY_TOL {
        return Err(NumkitError::NotPositive {
            min_eigenvalue: min_sigma,
        });
    }
    let sq = psd_sqrt(rho)?;
    let inner = hermitian_part(&(&sq * sigma * &sq));
    let vals = eigenvalues(&inner)?;
    let f: f64 = vals.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok(f.clamp(0.0, 1.0))
}

/// Trace distance ½‖A − B‖₁ for Hermitian A, B.
pub fn trace_distance(a: &CMat, b: &CMat) -> Result<f64> {
    let vals = eigenvalues(&hermitian_part(&(a - b)))?;
    Ok(0.5 * vals.iter().map(|v| v.abs()).sum::<f64>())
}

/// Hermitian, unit-trace, positive operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    pub fn new(op: Operator) -> Result<Self> {
        Self::with_tolerance(op, HERMITIAN_TOL, TRACE_TOL, POSITIVITY_TOL)
    }

    pub fn with_tolerance(
        op: Operator,
        herm_tol: f64,
        trace_tol: f64,
        pos_tol: f64,
    ) -> Result<Self> {
        let dev = hermitian_deviation(&op.mat);
        if dev > herm_tol {
            return Err(NumkitError::NotHermitian { deviation: dev });
        }
        let tr = op.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(NumkitError::TraceNotUnit { trace: tr.re });
        }
        let min = min_eigenvalue(&op.mat)?;
        if min < -pos_tol {
            return Err(NumkitError::NotPositive {
                min_eigenvalue: min,
            });
        }
        Ok(Self { op })
    }

    pub fn from_matrix(mat: CMat, dims: Vec<usize>) -> Result<Self> {
        Self::new(Operator::new(mat, dims)?)
    }

    /// Projector onto a (normalized) pure state.
    pub fn pure(psi: &CVec, dims: Vec<usize>) -> Result<Self> {
        let norm = psi.norm();
        let v = psi / C64::new(norm, 0.0);
        Self::from_matrix(&v * v.adjoint(), dims)
    }

    pub fn maximally_mixed(dims: Vec<usize>) -> Self {
        let d: usize = dims.iter().product();
        let mat = CMat::identity(d, d) * C64::new(1.0 / d as f64, 0.0);
        Self {
            op: Operator { dims, mat },
        }
    }

    /// Diagonal state in the computational basis.
    pub fn diagonal(probs: &[f64], dims: Vec<usize>) -> Result<Self> {
        let v = DVector::from_iterator(probs.len(), probs.iter().map(|&p| C64::new(p, 0.0)));
        Self::from_matrix(CMat::from_diagonal(&v), dims)
    }

    pub fn basis_state(index: usize, dims: Vec<usize>) -> Self {
        let d: usize = dims.iter().product();
        let mut mat = CMat::zeros(d, d);
        mat[(index, index)] = C64::new(1.0, 0.0);
        Self {
            op: Operator { dims, mat },
        }
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn matrix(&self) -> &CMat {
        &self.op.mat
    }

    pub fn dims(&self) -> &[usize] {
        &self.op.dims
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn into_operator(self) -> Operator {
        self.op
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.op.mat).expect("density matrix is Hermitian")
    }

    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        let reduced = partial_trace(&self.op, keep)?;
        DensityMatrix::with_tolerance(reduced, 1e-9, TRACE_TOL, 1e-8)
    }

    pub fn partial_transpose(&self, factors: &[usize]) -> Result<Operator> {
        partial_transpose(&self.op, factors)
    }

    /// ⟨psi|rho|psi⟩ for a normalized `psi`.
    pub fn expectation_pure(&self, psi: &CVec) -> f64 {
        (psi.adjoint() * self.matrix() * psi)[(0, 0)].re
    }
}

/// Kraus representation of a channel on a `dim`-dimensional system.
#[derive(Debug, Clone)]
pub struct KrausSet {
    dim: usize,
    ops: Vec<CMat>,
}

impl KrausSet {
    /// Completeness is checked to 1e-10.
    pub fn new(ops: Vec<CMat>) -> Result<Self> {
        Self::with_tolerance(ops, 1e-10)
    }

    pub fn with_tolerance(ops: Vec<CMat>, tol: f64) -> Result<Self> {
        let dim = ops.first().map(|m| m.nrows()).unwrap_or(0);
        for m in &ops {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(NumkitError::DimensionMismatch {
                    expected: dim,
                    found: m.nrows(),
                });
            }
        }
        let dev = completeness_deviation(&ops, dim);
        if dev > tol {
            return Err(NumkitError::IncompleteKraus { deviation: dev });
        }
        Ok(Self { dim, ops })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operators(&self) -> &[CMat] {
        &self.ops
    }

    pub fn completeness_deviation(&self) -> f64 {
        completeness_deviation(&self.ops, self.dim)
    }

    pub fn apply(&self, rho: &CMat) -> CMat {
        let mut out = CMat::zeros(self.dim, self.dim);
        for e in &self.ops {
            out += e * rho * e.adjoint();
        }
        out
    }
}

fn completeness_deviation(ops: &[CMat], dim: usize) -> f64 {
    let mut sum = CMat::zeros(dim, dim);
    for e in ops {
        sum += e.adjoint() * e;
    }
    (sum - CMat::identity(dim, dim))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Jamiolkowski state of a one- or two-qubit channel.
///
/// Factor order is (ancilla a, output b) for arity 1 and (a, b, c, d) for
/// arity 2, where b and c hold the two channel outputs and a, d are the
/// ancillas maximally entangled with the first and second input:
/// `(1/d²) Σ |i⟩⟨j|_a ⊗ Λ(|ik⟩⟨jl|)_bc ⊗ |k⟩⟨l|_d`.
#[derive(Debug, Clone)]
pub struct ChoiState {
    arity: usize,
    state: DensityMatrix,
}

impl ChoiState {
    pub fn new(arity: usize, mat: CMat) -> Result<Self> {
        Self::with_tolerance(arity, mat, CHOI_TP_TOL)
    }

    pub fn with_tolerance(arity: usize, mat: CMat, tp_tol: f64) -> Result<Self> {
        if arity != 1 && arity != 2 {
            return Err(NumkitError::UnsupportedArity(arity));
        }
        let dims = vec![2; 2 * arity];
        let state = DensityMatrix::with_tolerance(Operator::new(mat, dims)?, 1e-9, tp_tol, 1e-8)?;
        let choi = Self { arity, state };
        let dev = choi.marginal_deviation()?;
        if dev > tp_tol {
            return Err(NumkitError::NotTracePreserving { deviation: dev });
        }
        Ok(choi)
    }

    /// Build from the (inputs ⊗ outputs) ordering used by [`Self::standard_matrix`].
    pub fn from_standard(arity: usize, std: CMat) -> Result<Self> {
        match arity {
            1 => Self::new(1, std),
            2 => {
                // standard (a, d, b, c) -> stored (a, b, c, d)
                let op = Operator::new(std, vec![2; 4])?;
                Self::new(2, permute_factors(&op, &[0, 2, 3, 1])?.into_matrix())
            }
            other => Err(NumkitError::UnsupportedArity(other)),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Dimension of the channel's input (2 or 4).
    pub fn channel_dim(&self) -> usize {
        1 << self.arity
    }

    pub fn state(&self) -> &DensityMatrix {
        &self.state
    }

    pub fn matrix(&self) -> &CMat {
        self.state.matrix()
    }

    /// The Choi matrix with all ancillas first and all outputs second:
    /// (a, b) for arity 1, (a, d, b, c) for arity 2.
    pub fn standard_matrix(&self) -> CMat {
        match self.arity {
            1 => self.matrix().clone(),
            _ => permute_factors(self.state.operator(), &[0, 3, 1, 2])
                .expect("valid permutation")
                .into_matrix(),
        }
    }

    /// Max entrywise deviation of the ancilla marginal from the maximally mixed state.
    pub fn marginal_deviation(&self) -> Result<f64> {
        let keep: &[usize] = if self.arity == 1 { &[0] } else { &[0, 3] };
        let marg = partial_trace(self.state.operator(), keep)?;
        let d = marg.dim();
        let target = CMat::identity(d, d) * C64::new(1.0 / d as f64, 0.0);
        Ok((marg.matrix() - target)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max))
    }

    /// Choi state of the unitary channel `u` (qubit order matches the factor convention).
    pub fn from_unitary(u: &CMat) -> Result<Self> {
        let d = u.nrows();
        let arity = match d {
            2 => 1,
            4 => 2,
            _ => return Err(NumkitError::UnsupportedArity(d)),
        };
        let mut v = CVec::zeros(d * d);
        for i in 0..d {
            for o in 0..d {
                v[i * d + o] = u[(o, i)] / C64::new((d as f64).sqrt(), 0.0);
            }
        }
        Self::from_standard(arity, &v * v.adjoint())
    }

    pub fn from_kraus(kraus: &KrausSet) -> Result<Self> {
        let d = kraus.dim();
        let arity = match d {
            2 => 1,
            4 => 2,
            _ => return Err(NumkitError::UnsupportedArity(d)),
        };
        let mut std = CMat::zeros(d * d, d * d);
        for e in kraus.operators() {
            let mut v = CVec::zeros(d * d);
            for i in 0..d {
                for o in 0..d {
                    v[i * d + o] = e[(o, i)];
                }
            }
            std += &v * v.adjoint() * C64::new(1.0 / d as f64, 0.0);
        }
        Self::from_standard(arity, std)
    }
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(
        2,
        2,
        &[
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ],
    )
}

pub fn pauli_y() -> CMat {
    CMat::from_row_slice(
        2,
        2,
        &[
            C64::new(0.0, 0.0),
            C64::new(0.0, -1.0),
            C64::new(0.0, 1.0),
            C64::new(0.0, 0.0),
        ],
    )
}

pub fn pauli_z() -> CMat {
    CMat::from_row_slice(
        2,
        2,
        &[
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(-1.0, 0.0),
        ],
    )
}

pub fn identity(d: usize) -> CMat {
    CMat::identity(d, d)
}

/// Controlled-phase gate on two qubits.
pub fn cz() -> CMat {
    let mut m = CMat::identity(4, 4);
    m[(3, 3)] = C64::new(-1.0, 0.0);
    m
}

/// |+⟩^{⊗n}
pub fn plus_state(n: usize) -> CVec {
    let d = 1usize << n;
    CVec::from_element(d, C64::new(1.0 / (d as f64).sqrt(), 0.0))
}

/// Haar-random pure state from normalized complex Gaussians.
pub fn random_pure_state<R: Rng + ?Sized>(rng: &mut R, d: usize) -> CVec {
    let v = CVec::from_fn(d, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    });
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Random full-rank density matrix G G† / tr(G G†).
pub fn random_density_matrix<R: Rng + ?Sized>(rng: &mut R, dims: Vec<usize>) -> DensityMatrix {
    let d: usize = dims.iter().product();
    let g = CMat::from_fn(d, d, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    });
    let m = &g * g.adjoint();
    let tr = m.trace();
    let m = hermitian_part(&(m / tr));
    DensityMatrix::new(Operator::new(m, dims).expect("consistent dims"))
        .expect("valid random state")
}

/// Random Hermitian matrix with Gaussian entries.
pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> CMat {
    let g = CMat::from_fn(d, d, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    });
    hermitian_part(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn bell() -> CVec {
        let s = 1.0 / 2f64.sqrt();
        CVec::from_vec(vec![c(s), c(0.0), c(0.0), c(s)])
    }

    fn max_abs(m: &CMat) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn tensor_product_conventions() {
        let i2 = Operator::single(identity(2)).unwrap();
        let ii = tensor_product(&i2, &i2);
        assert_eq!(ii.matrix(), &identity(4));
        assert_eq!(ii.dims(), &[2, 2]);

        let z = Operator::single(pauli_z()).unwrap();
        let zi = tensor_product(&z, &i2);
        let diag: Vec<f64> = (0..4).map(|k| zi.matrix()[(k, k)].re).collect();
        assert_eq!(diag, vec![1.0, 1.0, -1.0, -1.0]);

        let p0 = Operator::single(CMat::from_row_slice(
            2,
            2,
            &[c(1.0), c(0.0), c(0.0), c(0.0)],
        ))
        .unwrap();
        let p1 = Operator::single(CMat::from_row_slice(
            2,
            2,
            &[c(0.0), c(0.0), c(0.0), c(1.0)],
        ))
        .unwrap();
        let p01 = tensor_product(&p0, &p1);
        let mut expected = CMat::zeros(4, 4);
        expected[(1, 1)] = c(1.0);
        assert_eq!(p01.matrix(), &expected);
    }

    #[test]
    fn partial_trace_of_bell_is_mixed() {
        let rho = DensityMatrix::pure(&bell(), vec![2, 2]).unwrap();
        let red = rho.partial_trace(&[0]).unwrap();
        assert!(max_abs(&(red.matrix() - identity(2) * c(0.5))) < 1e-15);
    }

    #[test]
    fn partial_trace_of_product_returns_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_density_matrix(&mut rng, vec![2]);
        let b = random_density_matrix(&mut rng, vec![3]);
        let ab = tensor_product(a.operator(), b.operator());
        let ra = partial_trace(&ab, &[0]).unwrap();
        let rb = partial_trace(&ab, &[1]).unwrap();
        assert!(max_abs(&(ra.matrix() - a.matrix())) < 1e-14);
        assert!(max_abs(&(rb.matrix() - b.matrix())) < 1e-14);
    }

    /// Brute-force index summation oracle.
    fn brute_trace_middle(m: &CMat, dims: [usize; 3]) -> CMat {
        let [d0, d1, d2] = dims;
        let mut out = CMat::zeros(d0 * d2, d0 * d2);
        for a in 0..d0 {
            for c2 in 0..d2 {
                for a2 in 0..d0 {
                    for cc in 0..d2 {
                        let mut s = c(0.0);
                        for b in 0..d1 {
                            s += m[((a * d1 + b) * d2 + c2, (a2 * d1 + b) * d2 + cc)];
                        }
                        out[(a * d2 + c2, a2 * d2 + cc)] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn partial_trace_sequential_equals_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = random_density_matrix(&mut rng, vec![2, 3, 2]);
        // trace factor index 2 (third) then index 1 (second) vs {1,2} at once
        let step1 = partial_trace(rho.operator(), &[0, 1]).unwrap();
        let step2 = partial_trace(&step1, &[0]).unwrap();
        let joint = partial_trace(rho.operator(), &[0]).unwrap();
        assert!(max_abs(&(step2.matrix() - joint.matrix())) < 1e-14);
        let middle = partial_trace(rho.operator(), &[0, 2]).unwrap();
        let oracle = brute_trace_middle(rho.matrix(), [2, 3, 2]);
        assert!(max_abs(&(middle.matrix() - oracle)) < 1e-14);
    }

    #[test]
    fn partial_trace_rejects_bad_factor() {
        let rho = DensityMatrix::maximally_mixed(vec![2, 2]);
        assert!(matches!(
            rho.partial_trace(&[2]),
            Err(NumkitError::InvalidFactor { .. })
        ));
        assert!(matches!(
            rho.partial_trace(&[]),
            Err(NumkitError::EmptyFactorSet)
        ));
        assert!(matches!(
            rho.partial_transpose(&[5]),
            Err(NumkitError::InvalidFactor { .. })
        ));
    }

    #[test]
    fn bell_partial_transpose_spectrum() {
        let rho = DensityMatrix::pure(&bell(), vec![2, 2]).unwrap();
        let pt = rho.partial_transpose(&[0]).unwrap();
        let vals = eigenvalues(pt.matrix()).unwrap();
        let expected = [-0.5, 0.5, 0.5, 0.5];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!((min_eigenvalue(pt.matrix()).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn product_state_is_ppt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_density_matrix(&mut rng, vec![2]);
        let b = random_density_matrix(&mut rng, vec![2]);
        let ab = tensor_product(a.operator(), b.operator());
        let mut before = eigenvalues(ab.matrix()).unwrap();
        let mut after = eigenvalues(partial_transpose(&ab, &[0]).unwrap().matrix()).unwrap();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(after[0] >= 0.0);
    }

    #[test]
    fn successive_partial_transposes_give_full_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_density_matrix(&mut rng, vec![2, 3]);
        let ta = partial_transpose(rho.operator(), &[0]).unwrap();
        let tab = partial_transpose(&ta, &[1]).unwrap();
        assert!(max_abs(&(tab.matrix() - rho.matrix().transpose())) < 1e-15);
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&(identity(4) * c(0.25))).unwrap() - 0.25).abs() < 1e-15);
        let d = CMat::from_diagonal(&CVec::from_vec(vec![c(0.7), c(0.3), c(0.0), c(0.0)]));
        assert!(min_eigenvalue(&d).unwrap().abs() < 1e-15);
        let mut bad = identity(2);
        bad[(0, 1)] = c(1.0);
        assert!(matches!(
            min_eigenvalue(&bad),
            Err(NumkitError::NotHermitian { .. })
        ));
    }

    #[test]
    fn fidelity_examples() {
        let zero = DensityMatrix::basis_state(0, vec![2]);
        let one = DensityMatrix::basis_state(1, vec![2]);
        let mixed = DensityMatrix::maximally_mixed(vec![2]);
        assert!((uhlmann_fidelity(&zero, &zero).unwrap() - 1.0).abs() < 1e-12);
        assert!(uhlmann_fidelity(&zero, &one).unwrap().abs() < 1e-12);
        assert!((uhlmann_fidelity(&zero, &mixed).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((uhlmann_fidelity(&mixed, &zero).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fidelity_rejects_bad_inputs() {
        let a = DensityMatrix::maximally_mixed(vec![2]);
        let b = DensityMatrix::maximally_mixed(vec![4]);
        assert!(matches!(
            uhlmann_fidelity(&a, &b),
            Err(NumkitError::DimensionMismatch { .. })
        ));
        let neg = CMat::from_diagonal(&CVec::from_vec(vec![c(1.1), c(-0.1)]));
        assert!(matches!(
            uhlmann_fidelity_matrices(a.matrix(), &neg),
            Err(NumkitError::NotPositive { .. })
        ));
        let tiny = CMat::from_diagonal(&CVec::from_vec(vec![c(1.0 + 5e-10), c(-5e-10)]));
        assert!(uhlmann_fidelity_matrices(a.matrix(), &tiny).is_ok());
    }

    #[test]
    fn eigen_reconstruction_up_to_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &d in &[2usize, 7, 32, 100, 256] {
            let h = random_hermitian(&mut rng, d);
            let (vals, vecs) = hermitian_eigen(&h).unwrap();
            let lam = CMat::from_diagonal(&CVec::from_iterator(d, vals.iter().map(|&v| c(v))));
            let rec = &vecs * lam * vecs.adjoint();
            assert!(max_abs(&(rec - &h)) < 1e-9, "dim {d}");
        }
    }

    #[test]
    fn choi_of_identity_and_kraus_round_trip() {
        let id = ChoiState::from_unitary(&identity(2)).unwrap();
        let rho_bell = &bell() * bell().adjoint();
        assert!(max_abs(&(id.matrix() - rho_bell)) < 1e-15);
        let k = KrausSet::new(vec![identity(4)]).unwrap();
        let choi = ChoiState::from_kraus(&k).unwrap();
        assert!(choi.marginal_deviation().unwrap() < 1e-15);
        // (a,b,c,d) Bell pairs a-b and c-d
        let v = bell().kronecker(&bell());
        assert!(max_abs(&(choi.matrix() - &v * v.adjoint())) < 1e-15);
    }

    #[test]
    fn kraus_completeness_enforced() {
        let half = identity(2) * c(0.5);
        assert!(matches!(
            KrausSet::new(vec![half]),
            Err(NumkitError::IncompleteKraus { .. })
        ));
    }

    #[test]
    fn permute_factors_swaps_qubits() {
        let op = Operator::new(kron(&pauli_z(), &pauli_x()), vec![2, 2]).unwrap();
        let swapped = permute_factors(&op, &[1, 0]).unwrap();
        assert!(max_abs(&(swapped.matrix() - kron(&pauli_x(), &pauli_z()))) < 1e-15);
    }
}
