//! Channel metrics, thresholds, noise-model fits, power laws and the
//! spin-packet model of a depolarized chain.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{self, ChainError, ChainSpec};
use crate::evolve::{self, EvolveError};
use crate::noise::{self, AnalyticChannel, NoiseError, NoiseSpec};
use crate::numkit::{self, CMat, CVec, ChoiState, NumkitError, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzeError {
    #[error("target dimension {found} does not match channel dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no crossing of level {level} in [{lo}, {hi}]")]
    NoSignChange { level: f64, lo: f64, hi: f64 },
    #[error("metric is not monotone near {at}")]
    NonMonotonic { at: f64 },
    #[error("fit did not converge after all restarts")]
    NotConverged,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

pub type Result<T> = std::result::Result<T, AnalyzeError>;

fn check_target(choi: &ChoiState, target: &CMat) -> Result<usize> {
    let d = choi.channel_dim();
    if target.nrows() != d || target.ncols() != d {
        return Err(AnalyzeError::DimensionMismatch {
            expected: d,
            found: target.nrows(),
        });
    }
    Ok(d)
}

/// Haar-averaged fidelity `(Σ_m |tr(A_m U†)|² + d) / (d(d+1))`.
pub fn avg_fidelity(choi: &ChoiState, target: &CMat) -> Result<f64> {
    let d = check_target(choi, target)? as f64;
    let kraus = evolve::choi_to_kraus(choi)?;
    let ud = target.adjoint();
    let s: f64 = kraus
        .operators()
        .iter()
        .map(|a| (a * &ud).trace().norm_sqr())
        .sum();
    Ok(((s + d) / (d * (d + 1.0))).clamp(0.0, 1.0))
}

/// Entanglement fidelity ⟨Φ_U|ρ^Λ|Φ_U⟩.
pub fn entanglement_fidelity(choi: &ChoiState, target: &CMat) -> Result<f64> {
    check_target(choi, target)?;
    let ideal = ChoiState::from_unitary(target)?;
    Ok((ideal.matrix().component_mul(&choi.matrix().conjugate()))
        .sum()
        .re)
}

/// `⟨ψ|U† Λ(|ψ⟩⟨ψ|) U|ψ⟩` for a normalized ψ.
pub fn specific_fidelity(choi: &ChoiState, target: &CMat, psi: &CVec) -> Result<f64> {
    let d = check_target(choi, target)?;
    if psi.len() != d {
        return Err(AnalyzeError::DimensionMismatch {
            expected: d,
            found: psi.len(),
        });
    }
    let out = evolve::apply_channel_operator(choi, &(psi * psi.adjoint()))?;
    let phi = target * psi;
    Ok((phi.adjoint() * out * &phi)[(0, 0)].re)
}

/// Uhlmann (root) state fidelity of the output for input ψ: the square root of
/// [`specific_fidelity`], the convention used for the `F^{++}` thresholds.
pub fn specific_state_fidelity(choi: &ChoiState, target: &CMat, psi: &CVec) -> Result<f64> {
    Ok(specific_fidelity(choi, target, psi)?.max(0.0).sqrt())
}

/// F^{++}: root state fidelity of the gate output for input |++⟩.
pub fn f_plus_plus(choi: &ChoiState, target: &CMat) -> Result<f64> {
    specific_state_fidelity(choi, target, &numkit::plus_state(2))
}

/// Minimum eigenvalue of the Choi partial transpose across a|b (arity 1) or
/// (ab)|(cd) (arity 2).
pub fn ppt_min_eigenvalue(choi: &ChoiState) -> Result<f64> {
    let factors: &[usize] = if choi.arity() == 1 { &[0] } else { &[2, 3] };
    let pt = choi.state().partial_transpose(factors)?;
    Ok(numkit::min_eigenvalue(pt.matrix())?)
}

/// Uhlmann fidelity F_Λ between two Choi states.
pub fn choi_fidelity(a: &ChoiState, b: &ChoiState) -> Result<f64> {
    Ok(numkit::uhlmann_fidelity(a.state(), b.state())?)
}

/// Ideal logical operation of a probe: the inversion restricted to the probe sites.
pub fn ideal_target(chain: &ChainSpec, input_sites: &[usize]) -> Result<CMat> {
    Ok(chain::ideal_circuit(chain, input_sites)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMetrics {
    pub avg_fidelity: f64,
    pub eps_min: f64,
    /// Arity 1: entanglement breaking. Arity 2: entanglement generation no
    /// longer certified.
    pub breaking: bool,
    pub f_plus_plus: Option<f64>,
}

pub fn channel_metrics(choi: &ChoiState, target: &CMat) -> Result<ChannelMetrics> {
    let eps_min = ppt_min_eigenvalue(choi)?;
    Ok(ChannelMetrics {
        avg_fidelity: avg_fidelity(choi, target)?,
        eps_min,
        breaking: eps_min >= 0.0,
        f_plus_plus: if choi.arity() == 2 {
            Some(f_plus_plus(choi, target)?)
        } else {
            None
        },
    })
}

/// Monte-Carlo estimate of the Haar-averaged specific fidelity: (mean, standard error).
pub fn haar_average_fidelity(
    choi: &ChoiState,
    target: &CMat,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = check_target(choi, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = choi.standard_matrix();
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let psi = numkit::random_pure_state(&mut rng, d);
        let phi = target * &psi;
        // ⟨φ|Λ(ψψ†)|φ⟩ = d Σ ψ_k ψ_l* φ_i* φ_j C_{(k,i),(l,j)}
        let mut f = C64::new(0.0, 0.0);
        for k in 0..d {
            for l in 0..d {
                let w = psi[k] * psi[l].conj();
                for i in 0..d {
                    for j in 0..d {
                        f += w * phi[i].conj() * phi[j] * c[(k * d + i, l * d + j)];
                    }
                }
            }
        }
        let f = f.re * d as f64;
        sum += f;
        sum2 += f * f;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdOptions {
    /// Evaluation points (endpoints included) used to check monotonicity
    /// and to narrow the bracket before bisection.
    pub samples: usize,
    pub rel_tol: f64,
    /// Bisect on a logarithmic scale (requires lo > 0).
    pub geometric: bool,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            samples: 5,
            rel_tol: 1e-4,
            geometric: true,
        }
    }
}

/// Parameter where a monotone `metric` crosses `level`, by bisection.
pub fn find_threshold(
    mut metric: impl FnMut(f64) -> Result<f64>,
    level: f64,
    lo: f64,
    hi: f64,
    opts: ThresholdOptions,
) -> Result<f64> {
    if !(lo < hi) || opts.samples < 2 {
        return Err(AnalyzeError::InvalidInput(format!("bracket [{lo}, {hi}]")));
    }
    let geometric = opts.geometric && lo > 0.0;
    let point = |u: f64| {
        if geometric {
            lo * (hi / lo).powf(u)
        } else {
            lo + (hi - lo) * u
        }
    };
    let xs: Vec<f64> = (0..opts.samples)
        .map(|k| point(k as f64 / (opts.samples - 1) as f64))
        .collect();
    let mut ys = Vec::with_capacity(xs.len());
    for &x in &xs {
        ys.push(metric(x)? - level);
    }
    let increasing = ys[ys.len() - 1] > ys[0];
    for k in 1..ys.len() {
        let step = ys[k] - ys[k - 1];
        if (increasing && step < 0.0) || (!increasing && step > 0.0) {
            return Err(AnalyzeError::NonMonotonic { at: xs[k] });
        }
    }
    let k = match (1..ys.len()).find(|&k| ys[k - 1].signum() != ys[k].signum() || ys[k] == 0.0) {
        Some(k) => k,
        None => return Err(AnalyzeError::NoSignChange { level, lo, hi }),
    };
    let (mut a, mut b) = (xs[k - 1], xs[k]);
    let (mut fa, fb) = (ys[k - 1], ys[k]);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    for _ in 0..200 {
        let mid = if geometric {
            (a * b).sqrt()
        } else {
            0.5 * (a + b)
        };
        if (b - a).abs() <= opts.rel_tol * mid.abs() {
            break;
        }
        let fm = metric(mid)? - level;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(if geometric {
        (a * b).sqrt()
    } else {
        0.5 * (a + b)
    })
}

/// Analytic single-spin noise models fitted to measured fidelity curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// γ = κ, β = ζκ, α = 0 over a κ grid.
    DephasingDecay,
    /// Thermal α(T), β(T) at fixed κ with γ = ζ α(T) over a T/Δ grid.
    ThermalDephasing { kappa: f64 },
    /// α = β = ζ₁κ, γ = ζ₂κ over a κ grid.
    Depolarizing,
}

impl NoiseModel {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::DephasingDecay => "dephasing-decay",
            NoiseModel::ThermalDephasing { .. } => "thermal-dephasing",
            NoiseModel::Depolarizing => "depolarizing",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            NoiseModel::Depolarizing => 2,
            _ => 1,
        }
    }

    /// Effective single-spin noise at grid value `x` for parameters `zeta`.
    pub fn noise(&self, x: f64, zeta: &[f64]) -> Result<NoiseSpec> {
        Ok(match *self {
            NoiseModel::DephasingDecay => NoiseSpec::custom(0.0, zeta[0] * x, x)?,
            NoiseModel::ThermalDephasing { kappa } => {
                let th = NoiseSpec::thermal(kappa, x)?;
                th.with_gamma(zeta[0] * th.alpha())?
            }
            NoiseModel::Depolarizing => NoiseSpec::custom(zeta[0] * x, zeta[0] * x, zeta[1] * x)?,
        })
    }

    pub fn channel(&self, x: f64, zeta: &[f64], t: f64) -> Result<AnalyticChannel> {
        Ok(AnalyticChannel::new(self.noise(x, zeta)?, t)?)
    }

    pub fn avg_fidelity(&self, x: f64, zeta: &[f64], t: f64) -> Result<f64> {
        Ok(noise::analytic_avg_fidelity(&self.channel(x, zeta, t)?))
    }
}

/// Measured single-qubit fidelity curve, optionally with the Choi states.
#[derive(Debug, Clone)]
pub struct FitData {
    pub grid: Vec<f64>,
    pub fidelities: Vec<f64>,
    pub chois: Option<Vec<ChoiState>>,
    /// Exposure time of the analytic model (τ).
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: NoiseModel,
    pub params: Vec<f64>,
    /// Root of the sum of squared fidelity residuals.
    pub residual: f64,
    pub grid: Vec<f64>,
    /// Largest 1 − F_Λ between model and measured Choi states over the grid.
    pub max_choi_infidelity: Option<f64>,
}

/// Minimize `f` with the Nelder–Mead simplex. Returns (point, value, converged).
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    ftol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] != 0.0 { step * x[i].abs() } else { step };
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let centroid = |s: &[Vec<f64>], skip: usize| -> Vec<f64> {
        let mut c = vec![0.0; n];
        for (k, x) in s.iter().enumerate() {
            if k != skip {
                for i in 0..n {
                    c[i] += x[i] / n as f64;
                }
            }
        }
        c
    };
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
    };
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&k| simplex[k].clone()).collect();
        vals = order.iter().map(|&k| vals[k]).collect();
        let spread = (vals[n] - vals[0]).abs();
        let size = simplex
            .iter()
            .skip(1)
            .map(|x| {
                x.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread <= ftol * (vals[0].abs() + vals[n].abs()) + 1e-300
            && size < 1e-10 * (1.0 + simplex[0].iter().map(|v| v.abs()).fold(0.0, f64::max))
        {
            return (simplex[0].clone(), vals[0], true);
        }
        let c = centroid(&simplex, n);
        let xr = lerp(&c, &simplex[n], -1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = lerp(&c, &simplex[n], -2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = lerp(&c, &xr, 0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = lerp(&c, &simplex[n], 0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for k in 1..=n {
                    simplex[k] = lerp(&simplex[0], &simplex[k], 0.5);
                    vals[k] = f(&simplex[k]);
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    (simplex[best].clone(), vals[best], false)
}

/// Number of randomized restarts added to the deterministic start.
pub const FIT_RESTARTS: usize = 5;

/// Least-squares fit of an analytic noise model to a fidelity curve.
pub fn fit_noise_model(data: &FitData, model: NoiseModel) -> Result<FitResult> {
    if data.grid.len() < 8 || data.grid.len() != data.fidelities.len() {
        return Err(AnalyzeError::InvalidInput(format!(
            "need at least 8 matched grid points, got {} / {}",
            data.grid.len(),
            data.fidelities.len()
        )));
    }
    let np = model.n_params();
    // Parameters are optimized as |p| so the rates stay non-negative.
    let mut objective = |p: &[f64]| -> f64 {
        let zeta: Vec<f64> = p.iter().map(|v| v.abs()).collect();
        let mut s = 0.0;
        for (&x, &f) in data.grid.iter().zip(&data.fidelities) {
            match model.avg_fidelity(x, &zeta, data.t) {
                Ok(m) => s += (m - f).powi(2),
                Err(_) => return f64::INFINITY,
            }
        }
        s
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut any_converged = false;
    for restart in 0..=FIT_RESTARTS {
        let x0: Vec<f64> = if restart == 0 {
            vec![1.0; np]
        } else {
            (0..np)
                .map(|_| 10f64.powf(rng.random_range(-1.5..2.0)))
                .collect()
        };
        let (x, v, ok) = nelder_mead(&mut objective, &x0, 0.5, 1e-14, 5000);
        any_converged |= ok;
        if best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((x, v));
        }
    }
    if !any_converged {
        return Err(AnalyzeError::NotConverged);
    }
    let (x, v) = best.expect("at least one start");
    let params: Vec<f64> = x.iter().map(|p| p.abs()).collect();
    let max_choi_infidelity = match &data.chois {
        Some(chois) => {
            let mut worst: f64 = 0.0;
            for (&g, measured) in data.grid.iter().zip(chois) {
                let k = noise::kraus_set(&model.channel(g, &params, data.t)?);
                let model_choi = ChoiState::from_kraus(&k)?;
                worst = worst.max(1.0 - choi_fidelity(&model_choi, measured)?);
            }
            Some(worst)
        }
        None => None,
    };
    Ok(FitResult {
        model,
        params,
        residual: v.sqrt(),
        grid: data.grid.clone(),
        max_choi_infidelity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    /// y ≈ prefactor · N^(−exponent)
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
}

/// Log–log linear regression of `y ≈ A N^{−x}`.
pub fn power_law_fit(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.len() < 4 {
        return Err(AnalyzeError::InvalidInput(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, y)| !(n > 0.0 && y > 0.0)) {
        return Err(AnalyzeError::InvalidInput(
            "power-law points must be positive".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(PowerLaw {
        exponent: -slope,
        prefactor: intercept.exp(),
        r_squared,
    })
}

/// Per-site exposure of a single excitation crossing the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketProfile {
    /// Fraction of τ spent near each site; sums to 1.
    pub f: Vec<f64>,
    /// Packet spread (inverse participation ratio) when its mean passes each site.
    pub s: Vec<f64>,
    /// Per-site depolarizing survival `exp(−κ f_j s_j τ)`.
    pub p: Vec<f64>,
    /// Product of the p_j.
    pub p_total: f64,
    pub sum_fs: f64,
    /// Coupling at which the concatenated depolarizing channel breaks entanglement.
    pub kappa_c_over_j: f64,
}

/// Time at which the packet's mean position passes site `j`:
/// ⟨x⟩(t) = (N+1)/2 − S cos(Jt).
pub fn packet_crossing_time(spec: &ChainSpec, site: usize) -> f64 {
    let s = spec.pseudo_spin();
    if s == 0.0 {
        return 0.0;
    }
    let c = ((spec.n() as f64 + 1.0) / 2.0 - site as f64) / s;
    c.clamp(-1.0, 1.0).acos() / spec.j()
}

pub fn packet_model(spec: &ChainSpec, kappa_over_j: f64) -> Result<PacketProfile> {
    let n = spec.n();
    let (f, s) = if n == 1 {
        (vec![1.0], vec![1.0])
    } else {
        let t = spec.couplings();
        let inv: Vec<f64> = (0..n)
            .map(|j| {
                let mean = match (j.checked_sub(1).map(|b| t[b]), t.get(j)) {
                    (Some(a), Some(b)) => 0.5 * (a + b),
                    (Some(a), None) => a,
                    (None, Some(b)) => *b,
                    (None, None) => unreachable!(),
                };
                1.0 / mean
            })
            .collect();
        let total: f64 = inv.iter().sum();
        let f: Vec<f64> = inv.iter().map(|v| v / total).collect();
        let mut s = Vec::with_capacity(n);
        for site in 1..=n {
            let probs = chain::single_particle_packet(spec, packet_crossing_time(spec, site))?;
            s.push(1.0 / probs.iter().map(|p| p * p).sum::<f64>());
        }
        (f, s)
    };
    let tau = spec.inversion_time();
    let kappa = kappa_over_j * spec.j();
    let p: Vec<f64> = f
        .iter()
        .zip(&s)
        .map(|(fj, sj)| (-kappa * fj * sj * tau).exp())
        .collect();
    let sum_fs: f64 = f.iter().zip(&s).map(|(a, b)| a * b).sum();
    Ok(PacketProfile {
        p_total: p.iter().product(),
        kappa_c_over_j: 3f64.ln() / (PI * sum_fs),
        f,
        s,
        p,
        sum_fs,
    })
}
