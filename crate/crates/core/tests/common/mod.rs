//! Independent reference implementations used as test oracles. Everything
//! here is built from Kronecker products of 2×2 matrices and dense linear
//! algebra, sharing no code paths with the library's structured engine.
#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

pub type M = DMatrix<C64>;

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn m2(a: [[f64; 2]; 2]) -> M {
    M::from_row_slice(2, 2, &[c(a[0][0]), c(a[0][1]), c(a[1][0]), c(a[1][1])])
}

pub fn sx() -> M {
    m2([[0.0, 1.0], [1.0, 0.0]])
}

pub fn sy() -> M {
    let z = c(0.0);
    M::from_row_slice(2, 2, &[z, C64::new(0.0, -1.0), C64::new(0.0, 1.0), z])
}

pub fn sz() -> M {
    m2([[1.0, 0.0], [0.0, -1.0]])
}

pub fn eye(d: usize) -> M {
    M::identity(d, d)
}

pub fn kron(a: &M, b: &M) -> M {
    a.kronecker(b)
}

/// `op` on `site` (1-based, site 1 leftmost factor) of `n` qubits.
pub fn site_op(n: usize, site: usize, op: &M) -> M {
    let mut out = eye(1);
    for s in 1..=n {
        out = if s == site {
            kron(&out, op)
        } else {
            kron(&out, &eye(2))
        };
    }
    out
}

/// Chain Hamiltonian from Pauli strings.
pub fn pauli_hamiltonian(n: usize, j: f64, delta_over_j: f64) -> M {
    let d = 1 << n;
    let s = (n as f64 - 1.0) / 2.0;
    let h = s * j + delta_over_j * j;
    let mut out = M::zeros(d, d);
    for b in 1..n {
        let t = 0.5 * ((b * (n - b)) as f64).sqrt();
        let xx = site_op(n, b, &sx()) * site_op(n, b + 1, &sx());
        let yy = site_op(n, b, &sy()) * site_op(n, b + 1, &sy());
        out -= (xx + yy) * c(0.5 * j * t);
    }
    for site in 1..=n {
        out += (eye(d) - site_op(n, site, &sz())) * c(0.5 * h);
    }
    out
}

/// Jump operators `√α|1⟩⟨0|`, `√β|0⟩⟨1|`, `√(γ/2) σᶻ` on every site.
pub fn jump_ops(n: usize, alpha: f64, beta: f64, gamma: f64) -> Vec<M> {
    let raise = m2([[0.0, 0.0], [1.0, 0.0]]);
    let lower = m2([[0.0, 1.0], [0.0, 0.0]]);
    let mut out = Vec::new();
    for site in 1..=n {
        if alpha > 0.0 {
            out.push(site_op(n, site, &raise) * c(alpha.sqrt()));
        }
        if beta > 0.0 {
            out.push(site_op(n, site, &lower) * c(beta.sqrt()));
        }
        if gamma > 0.0 {
            out.push(site_op(n, site, &sz()) * c((gamma / 2.0).sqrt()));
        }
    }
    out
}

pub fn dense_rhs(h: &M, ls: &[M], rho: &M) -> M {
    let i = C64::new(0.0, 1.0);
    let mut out = (h * rho - rho * h) * (-i);
    for l in ls {
        let ld = l.adjoint();
        let ll = &ld * l;
        out += l * rho * &ld - (&ll * rho + rho * &ll) * c(0.5);
    }
    out
}

/// Fixed-step classical RK4. Jump operators are applied through their
/// nonzero entries; the anticommutator part is folded into `H_eff`.
pub fn rk4(h: &M, ls: &[M], rho0: &M, t: f64, steps: usize) -> M {
    let i = C64::new(0.0, 1.0);
    let mut heff = h.clone();
    for l in ls {
        heff -= l.adjoint() * l * (i * 0.5);
    }
    let a = &heff * (-i);
    let a_dag = a.adjoint();
    let sparse: Vec<Vec<(usize, usize, C64)>> = ls
        .iter()
        .map(|l| {
            let mut nz = Vec::new();
            for r in 0..l.nrows() {
                for cc in 0..l.ncols() {
                    if l[(r, cc)].norm() > 0.0 {
                        nz.push((r, cc, l[(r, cc)]));
                    }
                }
            }
            nz
        })
        .collect();
    let rhs = |rho: &M| -> M {
        let mut out = &a * rho + rho * &a_dag;
        for nz in &sparse {
            for &(r1, c1, v1) in nz {
                for &(r2, c2, v2) in nz {
                    out[(r1, r2)] += v1 * rho[(c1, c2)] * v2.conj();
                }
            }
        }
        out
    };
    let dt = t / steps as f64;
    let mut rho = rho0.clone();
    for _ in 0..steps {
        let k1 = rhs(&rho);
        let k2 = rhs(&(&rho + &k1 * c(dt / 2.0)));
        let k3 = rhs(&(&rho + &k2 * c(dt / 2.0)));
        let k4 = rhs(&(&rho + &k3 * c(dt)));
        rho += (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(dt / 6.0);
    }
    rho
}

/// Column-stacking Liouvillian superoperator.
pub fn liouvillian(h: &M, ls: &[M]) -> M {
    let d = h.nrows();
    let id = eye(d);
    let i = C64::new(0.0, 1.0);
    let mut sup = (kron(&id, h) - kron(&h.transpose(), &id)) * (-i);
    for l in ls {
        let ll = l.adjoint() * l;
        sup +=
            kron(&l.conjugate(), l) - kron(&id, &ll) * c(0.5) - kron(&ll.transpose(), &id) * c(0.5);
    }
    sup
}

pub fn vec_col(m: &M) -> M {
    let d = m.nrows();
    M::from_fn(d * d, 1, |k, _| m[(k % d, k / d)])
}

pub fn unvec_col(v: &M, d: usize) -> M {
    M::from_fn(d, d, |r, cc| v[(cc * d + r, 0)])
}

/// ρ(t) = unvec(exp(L t) vec ρ₀).
pub fn superop_evolve(h: &M, ls: &[M], rho0: &M, t: f64) -> M {
    let prop = (liouvillian(h, ls) * c(t)).exp();
    unvec_col(&(prop * vec_col(rho0)), rho0.nrows())
}

/// Reduced density matrix on the listed qubit positions (0 = most
/// significant), in the listed order.
pub fn reduce(rho: &M, n_qubits: usize, keep: &[usize]) -> M {
    let q = keep.len();
    let bit = |x: usize, pos: usize| (x >> (n_qubits - 1 - pos)) & 1;
    let kept = |x: usize| {
        keep.iter()
            .enumerate()
            .fold(0, |acc, (k, &p)| acc | bit(x, p) << (q - 1 - k))
    };
    let mut env_mask = (1usize << n_qubits) - 1;
    for &p in keep {
        env_mask &= !(1 << (n_qubits - 1 - p));
    }
    let mut out = M::zeros(1 << q, 1 << q);
    let d = 1 << n_qubits;
    for r in 0..d {
        for cc in 0..d {
            if r & env_mask == cc & env_mask {
                out[(kept(r), kept(cc))] += rho[(r, cc)];
            }
        }
    }
    out
}

/// Choi matrix (ancillas ⊗ mirror outputs) obtained by entangling ancillas
/// with the input sites and integrating the dilated chain with RK4.
pub fn dilation_choi(
    n: usize,
    delta_over_j: f64,
    rates: (f64, f64, f64),
    sites: &[usize],
    steps: usize,
) -> M {
    let q = sites.len();
    let total = q + n;
    let h = kron(&eye(1 << q), &pauli_hamiltonian(n, 1.0, delta_over_j));
    let ls: Vec<M> = jump_ops(n, rates.0, rates.1, rates.2)
        .iter()
        .map(|l| kron(&eye(1 << q), l))
        .collect();
    let dq = 1usize << q;
    let mut psi = M::zeros(1 << total, 1);
    for x in 0..dq {
        let mut chain_bits = 0usize;
        for (k, &s) in sites.iter().enumerate() {
            if (x >> (q - 1 - k)) & 1 == 1 {
                chain_bits |= 1 << (n - s);
            }
        }
        psi[((x << n) | chain_bits, 0)] = c(1.0 / (dq as f64).sqrt());
    }
    let rho0 = &psi * psi.adjoint();
    let rho = rk4(&h, &ls, &rho0, std::f64::consts::PI, steps);
    let mut keep: Vec<usize> = (0..q).collect();
    keep.extend(sites.iter().map(|&s| q + (n - s)));
    reduce(&rho, total, &keep)
}

pub fn max_abs_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
