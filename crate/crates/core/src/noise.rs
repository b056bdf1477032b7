//! Local Lindblad noise: rates, the exact single-spin solution, its Kraus
//! form, closed-form fidelities and entanglement-breaking thresholds.
//!
//! Per spin the generator is
//! `α D[σ⁻] + β D[σ⁺] + (γ/2)(σᶻρσᶻ − ρ)` with `σ⁻ = |1⟩⟨0|` (↑ → ↓, creates
//! an excitation), `σ⁺ = |0⟩⟨1|` (↓ → ↑, decay) and `D[L]ρ = LρL† − ½{L†L, ρ}`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::chain::ChainSpec;
use crate::numkit::{self, CMat, DensityMatrix, KrausSet, NumkitError, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise parameter {field} = {value}")]
    InvalidParameter { field: &'static str, value: f64 },
    #[error("stationary populations are undefined for alpha = beta = 0")]
    UndefinedStationary,
    #[error("temperature must be positive, got T/Delta = {0}")]
    InvalidTemperature(f64),
    #[error("breaking occurs already for a single spin (N_c = {value})")]
    NonPositiveLength { value: f64 },
    #[error("no breaking threshold in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

pub type Result<T> = std::result::Result<T, NoiseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoisePreset {
    Decay,
    Dephasing,
    Depolarizing,
    Thermal,
    Custom,
}

impl NoisePreset {
    pub fn name(&self) -> &'static str {
        match self {
            NoisePreset::Decay => "decay",
            NoisePreset::Dephasing => "dephasing",
            NoisePreset::Depolarizing => "depolarizing",
            NoisePreset::Thermal => "thermal",
            NoisePreset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "decay" => NoisePreset::Decay,
            "dephasing" => NoisePreset::Dephasing,
            "depolarizing" => NoisePreset::Depolarizing,
            "thermal" => NoisePreset::Thermal,
            "custom" => NoisePreset::Custom,
            _ => return None,
        })
    }
}

/// Local rates applied identically to every chain spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    alpha: f64,
    beta: f64,
    gamma: f64,
    preset: NoisePreset,
    kappa: Option<f64>,
    t_over_delta: Option<f64>,
}

fn check_rate(field: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(NoiseError::InvalidParameter { field, value })
    }
}

impl NoiseSpec {
    pub fn custom(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        Ok(Self {
            alpha: check_rate("alpha", alpha)?,
            beta: check_rate("beta", beta)?,
            gamma: check_rate("gamma", gamma)?,
            preset: NoisePreset::Custom,
            kappa: None,
            t_over_delta: None,
        })
    }

    pub fn noiseless() -> Self {
        Self::custom(0.0, 0.0, 0.0).expect("zero rates are valid")
    }

    fn preset_rates(
        preset: NoisePreset,
        kappa: f64,
        alpha: f64,
        beta: f64,
        gamma: f64,
    ) -> Result<Self> {
        let mut s = Self::custom(alpha, beta, gamma)?;
        s.preset = preset;
        s.kappa = Some(check_rate("kappa", kappa)?);
        Ok(s)
    }

    /// (α, β, γ) = (0, κ, 0)
    pub fn decay(kappa: f64) -> Result<Self> {
        Self::preset_rates(NoisePreset::Decay, kappa, 0.0, kappa, 0.0)
    }

    /// (α, β, γ) = (0, 0, κ)
    pub fn dephasing(kappa: f64) -> Result<Self> {
        Self::preset_rates(NoisePreset::Dephasing, kappa, 0.0, 0.0, kappa)
    }

    /// (α, β, γ) = (κ/2, κ/2, κ/2)
    pub fn depolarizing(kappa: f64) -> Result<Self> {
        Self::preset_rates(
            NoisePreset::Depolarizing,
            kappa,
            kappa / 2.0,
            kappa / 2.0,
            kappa / 2.0,
        )
    }

    /// α + β = κ with α/β = e^{−Δ/T}; γ = 0. `t_over_delta` may be 0 (pure
    /// decay) or infinite.
    pub fn thermal(kappa: f64, t_over_delta: f64) -> Result<Self> {
        if t_over_delta.is_nan() || t_over_delta < 0.0 {
            return Err(NoiseError::InvalidParameter {
                field: "T_over_delta",
                value: t_over_delta,
            });
        }
        let x = boltzmann(t_over_delta);
        let mut s = Self::preset_rates(
            NoisePreset::Thermal,
            kappa,
            kappa * x / (1.0 + x),
            kappa / (1.0 + x),
            0.0,
        )?;
        s.t_over_delta = Some(t_over_delta);
        Ok(s)
    }

    pub fn from_preset(preset: NoisePreset, kappa: f64, t_over_delta: Option<f64>) -> Result<Self> {
        match preset {
            NoisePreset::Decay => Self::decay(kappa),
            NoisePreset::Dephasing => Self::dephasing(kappa),
            NoisePreset::Depolarizing => Self::depolarizing(kappa),
            NoisePreset::Thermal => Self::thermal(kappa, t_over_delta.unwrap_or(f64::INFINITY)),
            NoisePreset::Custom => Err(NoiseError::InvalidParameter {
                field: "preset",
                value: f64::NAN,
            }),
        }
    }

    /// Replace the dephasing rate, keeping α and β.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.gamma = check_rate("gamma", gamma)?;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn preset(&self) -> NoisePreset {
        self.preset
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    pub fn t_over_delta(&self) -> Option<f64> {
        self.t_over_delta
    }

    pub fn total_rate(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn is_noiseless(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }

    /// No jump creates excitations, so truncating to low sectors is exact.
    pub fn preserves_low_sectors(&self) -> bool {
        self.alpha == 0.0
    }

    /// (P↑, P↓) = (β, α) / (α + β).
    pub fn stationary_populations(&self) -> Result<(f64, f64)> {
        let s = self.total_rate();
        if s == 0.0 {
            return Err(NoiseError::UndefinedStationary);
        }
        Ok((self.beta / s, self.alpha / s))
    }

    /// ⟨σᶻ⟩ of the stationary state, (β − α)/(α + β).
    pub fn stationary_sz(&self) -> Result<f64> {
        let (up, down) = self.stationary_populations()?;
        Ok(up - down)
    }
}

/// e^{−Δ/T} with T in units of Δ.
pub fn boltzmann(t_over_delta: f64) -> f64 {
    if t_over_delta.is_infinite() {
        1.0
    } else if t_over_delta == 0.0 {
        0.0
    } else {
        (-1.0 / t_over_delta).exp()
    }
}

/// Exact single-spin channel after exposure time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticChannel {
    noise: NoiseSpec,
    t: f64,
    lambda: [f64; 4],
    mu: f64,
    x: f64,
}

/// Below this |μ| the Pauli-diagonal Kraus branch is used.
pub const MU_BRANCH_TOL: f64 = 1e-12;

impl AnalyticChannel {
    pub fn new(noise: NoiseSpec, t: f64) -> Result<Self> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(NoiseError::InvalidParameter {
                field: "t",
                value: t,
            });
        }
        let e = (-noise.total_rate() * t).exp();
        let g = coherence_factor(&noise, t);
        let l0 = 0.25 * (1.0 + 2.0 * g + e);
        let l1 = 0.25 * (1.0 - e);
        let l3 = 0.25 * (1.0 - 2.0 * g + e);
        let mu = match noise.stationary_sz() {
            Ok(sz) => 0.25 * sz * (1.0 - e),
            Err(_) => 0.0,
        };
        let x = (4.0 * mu * mu + (l0 - l3) * (l0 - l3)).sqrt();
        Ok(Self {
            noise,
            t,
            lambda: [l0, l1, l1, l3],
            mu,
            x,
        })
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn lambda(&self) -> [f64; 4] {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn uses_pauli_branch(&self) -> bool {
        self.mu.abs() < MU_BRANCH_TOL
    }

    /// Diagonal Kraus entries Υ₁..Υ₄; `None` on the μ = 0 branch.
    pub fn upsilon(&self) -> Option<[f64; 4]> {
        if self.uses_pauli_branch() {
            return None;
        }
        let [l0, _, _, l3] = self.lambda;
        let (mu, x) = (self.mu, self.x);
        let d = l0 - l3;
        // x − d and x + d without cancellation; x² − d² = 4μ².
        let x_minus_d = 4.0 * mu * mu / (x + d);
        let x_plus_d = x + d;
        let lower = ((l0 + l3 - x).max(0.0) / (x * x_minus_d)).sqrt();
        let upper = ((x + l0 + l3) / (x * x_plus_d)).sqrt();
        Some([
            0.5 * (x_minus_d - 2.0 * mu) * lower,
            0.5 * (x_minus_d + 2.0 * mu) * lower,
            0.5 * (2.0 * mu + x + d) * upper,
            0.5 * (x - 2.0 * mu + d) * upper,
        ])
    }
}

/// e^{−½(α+β+2γ)t}
fn coherence_factor(noise: &NoiseSpec, t: f64) -> f64 {
    (-0.5 * (noise.total_rate() + 2.0 * noise.gamma()) * t).exp()
}

/// Closed-form single-spin evolution (interaction picture).
pub fn apply_bloch_solution(
    noise: &NoiseSpec,
    rho_in: &DensityMatrix,
    t: f64,
) -> Result<DensityMatrix> {
    if rho_in.dim() != 2 {
        return Err(NumkitError::DimensionMismatch {
            expected: 2,
            found: rho_in.dim(),
        }
        .into());
    }
    let m = rho_in.matrix();
    let sz = (m[(0, 0)] - m[(1, 1)]).re;
    let e = (-noise.total_rate() * t).exp();
    let sz_t = match noise.stationary_sz() {
        Ok(s) => s + e * (sz - s),
        // γ-only: populations frozen
        Err(_) => sz,
    };
    let g = coherence_factor(noise, t);
    let mut out = CMat::zeros(2, 2);
    out[(0, 0)] = C64::new(0.5 * (1.0 + sz_t), 0.0);
    out[(1, 1)] = C64::new(0.5 * (1.0 - sz_t), 0.0);
    out[(0, 1)] = m[(0, 1)] * g;
    out[(1, 0)] = m[(1, 0)] * g;
    Ok(DensityMatrix::from_matrix(out, vec![2])?)
}

/// Four Kraus operators of the exact channel.
pub fn kraus_set(channel: &AnalyticChannel) -> KrausSet {
    let [l0, l1, l2, l3] = channel.lambda;
    let ops = match channel.upsilon() {
        None => vec![
            numkit::identity(2) * C64::new(l0.max(0.0).sqrt(), 0.0),
            numkit::pauli_x() * C64::new(l1.max(0.0).sqrt(), 0.0),
            numkit::pauli_y() * C64::new(l2.max(0.0).sqrt(), 0.0),
            numkit::pauli_z() * C64::new(l3.max(0.0).sqrt(), 0.0),
        ],
        Some([u1, u2, u3, u4]) => {
            let (up, down) = channel
                .noise
                .stationary_populations()
                .expect("mu != 0 implies alpha + beta > 0");
            let flip = (1.0 - (-channel.noise.total_rate() * channel.t).exp()).sqrt();
            let diag = |a: f64, b: f64| {
                CMat::from_row_slice(
                    2,
                    2,
                    &[
                        C64::new(a, 0.0),
                        C64::new(0.0, 0.0),
                        C64::new(0.0, 0.0),
                        C64::new(b, 0.0),
                    ],
                )
            };
            let mut lower = CMat::zeros(2, 2);
            lower[(0, 1)] = C64::new(up.sqrt() * flip, 0.0);
            let mut raise = CMat::zeros(2, 2);
            raise[(1, 0)] = C64::new(down.sqrt() * flip, 0.0);
            vec![diag(u1, u2), lower, diag(u3, u4), raise]
        }
    };
    KrausSet::with_tolerance(ops, 1e-10).expect("analytic Kraus set is complete")
}

/// Closed-form average fidelity of the single-spin channel against the identity.
pub fn analytic_avg_fidelity(channel: &AnalyticChannel) -> f64 {
    let [l0, _, _, l3] = channel.lambda;
    if channel.uses_pauli_branch() {
        return (4.0 * l0 + 2.0) / 6.0;
    }
    let x = channel.x;
    let d = l0 - l3;
    let s = l0 + l3;
    // (d + x)²(s + x)/(x(x + d)) + (d − x)²|s − x|/(x(x − d)), simplified.
    let x_minus_d = 4.0 * channel.mu * channel.mu / (x + d);
    let t1 = (d + x) * (s + x) / x;
    let t2 = x_minus_d * (s - x).abs() / x;
    (2.0 + t1 + t2) / 6.0
}

/// Decision and left-hand side of `2 P↑ P↓ e^{2γt}(cosh((α+β)t) − 1) ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakingTest {
    pub breaking: bool,
    pub lhs: f64,
}

pub fn is_entanglement_breaking(noise: &NoiseSpec, t: f64) -> BreakingTest {
    let lhs = if noise.alpha() == 0.0 || noise.beta() == 0.0 {
        0.0
    } else {
        let (up, down) = noise.stationary_populations().expect("alpha, beta > 0");
        2.0 * up * down * (2.0 * noise.gamma() * t).exp() * ((noise.total_rate() * t).cosh() - 1.0)
    };
    BreakingTest {
        breaking: lhs >= 1.0,
        lhs,
    }
}

/// Thermal-noise coupling κ_c/J above which one inversion breaks entanglement.
/// Infinite as T → 0.
pub fn thermal_critical_coupling(t_over_delta: f64, spec: &ChainSpec) -> Result<f64> {
    if t_over_delta.is_nan() || t_over_delta <= 0.0 {
        return Err(NoiseError::InvalidTemperature(t_over_delta));
    }
    let x = boltzmann(t_over_delta);
    if x == 0.0 {
        return Ok(f64::INFINITY);
    }
    let arg = (1.0 + x).powi(2) / (2.0 * x) + 1.0;
    Ok(arg.acosh() / (spec.inversion_time() * spec.j()))
}

/// Chain length at which thermal noise with effective dephasing γ = N α
/// becomes entanglement breaking within one inversion (J = 1 units, t = π).
/// Infinite as T → 0.
pub fn critical_length(t_over_delta: f64, kappa_over_j: f64) -> Result<f64> {
    if t_over_delta.is_nan() || t_over_delta <= 0.0 {
        return Err(NoiseError::InvalidTemperature(t_over_delta));
    }
    if !(kappa_over_j > 0.0 && kappa_over_j.is_finite()) {
        return Err(NoiseError::InvalidParameter {
            field: "kappa",
            value: kappa_over_j,
        });
    }
    let x = boltzmann(t_over_delta);
    if x == 0.0 {
        return Ok(f64::INFINITY);
    }
    let tau = PI;
    let alpha = kappa_over_j * x / (1.0 + x);
    let pp = x / (1.0 + x).powi(2);
    let base = 2.0 * pp * ((kappa_over_j * tau).cosh() - 1.0);
    let n = (1.0 / base).ln() / (2.0 * alpha * tau);
    if n <= 0.0 {
        return Err(NoiseError::NonPositiveLength { value: n });
    }
    Ok(n)
}

/// Smallest scale κ in `[lo, hi]` at which `family(κ)` breaks entanglement
/// after time `t`, by bisection on the breaking condition. Used when γ > 0
/// where no closed form is available.
pub fn critical_coupling_numeric(
    family: impl Fn(f64) -> Result<NoiseSpec>,
    t: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let f = |k: f64| -> Result<f64> { Ok(is_entanglement_breaking(&family(k)?, t).lhs - 1.0) };
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a)?, f(b)?);
    if fa > 0.0 || fb < 0.0 {
        return Err(NoiseError::NoRoot { lo, hi });
    }
    while (b - a) > 1e-14 * b.abs().max(1e-300) {
        let m = 0.5 * (a + b);
        if f(m)? < 0.0 {
            a = m;
        } else {
            b = m;
        }
        if m == a && m == b {
            break;
        }
    }
    Ok(0.5 * (a + b))
}
