mod common;

use std::f64::consts::PI;

use common::{c, max_abs_diff, M};
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spinbus::chain::{self, Basis, ChainSpec, SectorBasis};
use spinbus::evolve::{
    self, EvolutionJob, EvolveError, IntegratorSettings, Method, ProbeConfig, Representation,
};
use spinbus::noise::{self, AnalyticChannel, NoiseSpec};
use spinbus::numkit::{self, CMat, ChoiState, DensityMatrix, Operator};

fn full_job(n: usize, noise: NoiseSpec) -> EvolutionJob {
    EvolutionJob::new(ChainSpec::standard(n).unwrap(), noise)
}

fn full_state(rho: CMat, n: usize) -> DensityMatrix {
    DensityMatrix::from_matrix(rho, vec![2; n]).unwrap()
}

/// Embed a probe-register operator on `sites` with every other spin in |0⟩.
fn embed(op: &CMat, n: usize, sites: &[usize]) -> CMat {
    let d = 1 << n;
    let mut out = CMat::zeros(d, d);
    for p in 0..op.nrows() {
        for q in 0..op.ncols() {
            let r = chain::place_bits(n, sites, p) as usize;
            let s = chain::place_bits(n, sites, q) as usize;
            out[(r, s)] = op[(p, q)];
        }
    }
    out
}

#[test]
fn rhs_examples() {
    // κ = 0: an energy eigenprojector is stationary
    let spec = ChainSpec::standard(4).unwrap();
    let h = chain::build_hamiltonian(&spec, &Basis::full(4)).unwrap();
    let (_, vecs) = numkit::hermitian_eigen(&h).unwrap();
    let v = vecs.column(5).into_owned();
    let proj = full_state(&v * v.adjoint(), 4);
    let rhs = evolve::lindblad_rhs(&full_job(4, NoiseSpec::noiseless()), &proj).unwrap();
    assert!(rhs.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-12);

    let kappa = 0.7;
    let one = DensityMatrix::basis_state(1, vec![2]);
    let rhs = evolve::lindblad_rhs(&full_job(1, NoiseSpec::decay(kappa).unwrap()), &one).unwrap();
    let want = common::m2([[kappa, 0.0], [0.0, -kappa]]);
    assert!(max_abs_diff(&rhs, &want) < 1e-15);

    let plus = DensityMatrix::pure(&numkit::plus_state(1), vec![2]).unwrap();
    let job = full_job(1, NoiseSpec::dephasing(kappa).unwrap()).with_parts(false, true);
    let rhs = evolve::lindblad_rhs(&job, &plus).unwrap();
    let want = common::m2([[0.0, -0.5 * kappa], [-0.5 * kappa, 0.0]]);
    assert!(max_abs_diff(&rhs, &want) < 1e-15);
}

#[test]
fn rhs_matches_dense_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for (n, rates) in [
        (1, (0.3, 0.5, 0.2)),
        (3, (0.1, 0.4, 0.7)),
        (4, (0.25, 0.25, 0.25)),
        (5, (0.0, 0.3, 0.1)),
    ] {
        let ns = NoiseSpec::custom(rates.0, rates.1, rates.2).unwrap();
        let job = full_job(n, ns);
        let rho = numkit::random_density_matrix(&mut r, vec![2; n]);
        let got = evolve::lindblad_rhs(&job, &rho).unwrap();
        let h = common::pauli_hamiltonian(n, 1.0, 2.0);
        let ls = common::jump_ops(n, rates.0, rates.1, rates.2);
        let want = common::dense_rhs(&h, &ls, rho.matrix());
        assert!(max_abs_diff(&got, &want) < 1e-12, "N={n}");
        assert!(got.trace().norm() < 1e-12);
    }
}

#[test]
fn sector_rhs_is_restricted_full_rhs() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let n = 5;
    let ns = NoiseSpec::custom(0.0, 0.4, 0.3).unwrap();
    let job = full_job(n, ns)
        .with_representation(Representation::Sector { max_n: 2 })
        .unwrap();
    let basis = SectorBasis::up_to(n, 2).unwrap();
    let d = basis.dim();
    let small = numkit::random_density_matrix(&mut r, vec![d]);
    let got = evolve::lindblad_rhs(&job, &small).unwrap();
    let mut big = CMat::zeros(1 << n, 1 << n);
    for a in 0..d {
        for b in 0..d {
            big[(basis.state(a) as usize, basis.state(b) as usize)] = small.matrix()[(a, b)];
        }
    }
    let h = common::pauli_hamiltonian(n, 1.0, 2.0);
    let want = common::dense_rhs(&h, &common::jump_ops(n, 0.0, 0.4, 0.3), &big);
    for a in 0..d {
        for b in 0..d {
            let w = want[(basis.state(a) as usize, basis.state(b) as usize)];
            assert!((got[(a, b)] - w).norm() < 1e-12);
        }
    }
}

#[test]
fn noiseless_transfer() {
    for n in [2, 5, 8] {
        let job = full_job(n, NoiseSpec::noiseless());
        let first = chain::ChainSpec::standard(n).unwrap().site_mask(1) as usize;
        let rho0 = DensityMatrix::basis_state(first, vec![2; n]);
        let out = evolve::evolve_state(&job, &rho0).unwrap();
        let last = DensityMatrix::basis_state(1, vec![2; n]);
        let d = max_abs_diff(out.matrix(), last.matrix());
        assert!(d < 1e-8, "N={n}: {d:e}");
    }
}

#[test]
fn single_spin_matches_closed_form() {
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let spec = ChainSpec::standard(1).unwrap();
    let presets = [
        NoiseSpec::decay(0.4).unwrap(),
        NoiseSpec::dephasing(0.4).unwrap(),
        NoiseSpec::depolarizing(0.4).unwrap(),
        NoiseSpec::thermal(0.4, 0.7).unwrap(),
        NoiseSpec::custom(0.2, 0.9, 0.3).unwrap(),
    ];
    for ns in presets {
        let rho = numkit::random_density_matrix(&mut r, vec![2]);
        let t = spec.inversion_time();
        let want = noise::apply_bloch_solution(&ns, &rho, t).unwrap();
        let only_noise = EvolutionJob::new(spec, ns).with_parts(false, true);
        let got = evolve::evolve_state(&only_noise, &rho).unwrap();
        assert!(max_abs_diff(got.matrix(), want.matrix()) < 1e-8, "{ns:?}");
        // the field only rotates the coherence
        let lab = evolve::evolve_state(&EvolutionJob::new(spec, ns), &rho).unwrap();
        let u = chain::propagator(&spec, &Basis::full(1), t).unwrap();
        let rotated = &u * want.matrix() * u.adjoint();
        assert!(max_abs_diff(lab.matrix(), &rotated) < 1e-8, "{ns:?}");
    }
}

#[test]
fn thermal_spin_relaxes_to_stationary_state() {
    let ns = NoiseSpec::thermal(1.0, 0.6).unwrap();
    let (up, down) = ns.stationary_populations().unwrap();
    let job = full_job(1, ns).with_duration(40.0).unwrap();
    let out = evolve::evolve_state(&job, &DensityMatrix::basis_state(1, vec![2])).unwrap();
    let want = DensityMatrix::diagonal(&[up, down], vec![2]).unwrap();
    assert!(max_abs_diff(out.matrix(), want.matrix()) < 1e-8);
}

#[test]
fn evolution_matches_superoperator_exponential() {
    let mut r = ChaCha8Rng::seed_from_u64(24);
    for (n, rates, t) in [
        (2, (0.3, 0.1, 0.2), PI),
        (3, (0.05, 0.2, 0.1), PI),
        (4, (0.1, 0.1, 0.1), 0.7 * PI),
    ] {
        let ns = NoiseSpec::custom(rates.0, rates.1, rates.2).unwrap();
        let job = full_job(n, ns).with_duration(t).unwrap();
        let rho = numkit::random_density_matrix(&mut r, vec![2; n]);
        let got = evolve::evolve_state(&job, &rho).unwrap();
        let h = common::pauli_hamiltonian(n, 1.0, 2.0);
        let ls = common::jump_ops(n, rates.0, rates.1, rates.2);
        let want = common::superop_evolve(&h, &ls, rho.matrix(), t);
        assert!(max_abs_diff(got.matrix(), &want) < 1e-8, "N={n}");
    }
}

#[test]
fn sector_evolution_agrees_with_full_space() {
    let mut r = ChaCha8Rng::seed_from_u64(25);
    for n in 2..=6 {
        for ns in [
            NoiseSpec::decay(0.2).unwrap(),
            NoiseSpec::dephasing(0.2).unwrap(),
        ] {
            let max_n = 2.min(n);
            let basis = SectorBasis::up_to(n, max_n).unwrap();
            let d = basis.dim();
            let small = numkit::random_density_matrix(&mut r, vec![d]);
            let mut big = CMat::zeros(1 << n, 1 << n);
            for a in 0..d {
                for b in 0..d {
                    big[(basis.state(a) as usize, basis.state(b) as usize)] =
                        small.matrix()[(a, b)];
                }
            }
            let sector_job = full_job(n, ns)
                .with_representation(Representation::Sector { max_n })
                .unwrap();
            let got = evolve::evolve_state(&sector_job, &small).unwrap();
            let full = evolve::evolve_state(&full_job(n, ns), &full_state(big, n)).unwrap();
            for a in 0..d {
                for b in 0..d {
                    let w = full.matrix()[(basis.state(a) as usize, basis.state(b) as usize)];
                    assert!((got.matrix()[(a, b)] - w).norm() < 1e-8, "N={n} {ns:?}");
                }
            }
        }
    }
}

#[test]
fn decay_commutes_with_single_excitation_dynamics() {
    let n = 6;
    let ns = NoiseSpec::decay(0.3).unwrap();
    let job = full_job(n, ns)
        .with_representation(Representation::Sector { max_n: 1 })
        .unwrap();
    let basis = SectorBasis::up_to(n, 1).unwrap();
    let mut psi = numkit::CVec::zeros(basis.dim());
    psi[0] = c(0.6);
    psi[basis.index_of(1 << (n - 1)).unwrap()] = C64::new(0.0, 0.8);
    let rho0 = DensityMatrix::pure(&psi, vec![basis.dim()]).unwrap();
    let joint = evolve::evolve_state(&job, &rho0).unwrap();
    let coherent = evolve::evolve_state(&job.clone().with_parts(true, false), &rho0).unwrap();
    let split = evolve::evolve_state(&job.clone().with_parts(false, true), &coherent).unwrap();
    assert!(max_abs_diff(joint.matrix(), split.matrix()) < 1e-8);
    let other = evolve::evolve_state(&job.clone().with_parts(false, true), &rho0).unwrap();
    let other = evolve::evolve_state(&job.with_parts(true, false), &other).unwrap();
    assert!(max_abs_diff(joint.matrix(), other.matrix()) < 1e-8);
}

#[test]
fn linearity_matches_ancilla_dilation() {
    let cases: [(usize, (f64, f64, f64), Vec<usize>); 6] = [
        (2, (0.2, 0.2, 0.2), vec![1]),
        (3, (0.05, 0.15, 0.0), vec![1]),
        (4, (0.1, 0.05, 0.1), vec![2]),
        (2, (0.1, 0.2, 0.05), vec![1, 2]),
        (3, (0.15, 0.15, 0.15), vec![1, 3]),
        (3, (0.0, 0.2, 0.1), vec![2, 1]),
    ];
    for (n, rates, sites) in cases {
        let ns = NoiseSpec::custom(rates.0, rates.1, rates.2).unwrap();
        let probe = ProbeConfig::new(sites.clone(), n).unwrap();
        let choi = evolve::extract_channel(&full_job(n, ns), &probe).unwrap();
        let want = common::dilation_choi(n, 2.0, rates, &sites, 3000);
        let d = max_abs_diff(&choi.standard_matrix(), &want);
        assert!(d < 1e-9, "N={n} {sites:?}: {d:e}");
    }
}

#[test]
fn noiseless_channels_are_ideal() {
    for dj in [2.0, 3.0] {
        let spec = ChainSpec::new(5, 1.0, dj).unwrap();
        let job = EvolutionJob::new(spec, NoiseSpec::noiseless());
        for sites in [vec![1], vec![2], vec![1, 5], vec![4, 2]] {
            let probe = ProbeConfig::new(sites.clone(), 5).unwrap();
            let choi = evolve::extract_channel(&job, &probe).unwrap();
            let u = chain::ideal_circuit(&spec, &sites).unwrap();
            let want = ChoiState::from_unitary(&u).unwrap();
            assert!(
                max_abs_diff(choi.matrix(), want.matrix()) < 1e-8,
                "dj={dj} {sites:?}"
            );
        }
    }
    let spec = ChainSpec::standard(4).unwrap();
    let job = EvolutionJob::new(spec, NoiseSpec::noiseless());
    let bell = evolve::extract_channel(&job, &ProbeConfig::default_for(1, 4).unwrap()).unwrap();
    let want = ChoiState::from_unitary(&numkit::identity(2)).unwrap();
    assert!(max_abs_diff(bell.matrix(), want.matrix()) < 1e-8);
    let gate = evolve::extract_channel(&job, &ProbeConfig::default_for(2, 4).unwrap()).unwrap();
    let want = ChoiState::from_unitary(&numkit::cz()).unwrap();
    assert!(max_abs_diff(gate.matrix(), want.matrix()) < 1e-8);
}

#[test]
fn decay_channel_is_length_independent() {
    let kappa = 0.05;
    let ns = NoiseSpec::decay(kappa).unwrap();
    let analytic =
        ChoiState::from_kraus(&noise::kraus_set(&AnalyticChannel::new(ns, PI).unwrap())).unwrap();
    for n in [1, 2, 5, 9] {
        let job = full_job(n, ns)
            .with_representation(Representation::Sector { max_n: 1 })
            .unwrap();
        let choi = evolve::extract_channel(&job, &ProbeConfig::default_for(1, n).unwrap()).unwrap();
        let td = numkit::trace_distance(choi.matrix(), analytic.matrix()).unwrap();
        assert!(td < 1e-8, "N={n}: {td:e}");
    }
}

#[test]
fn extracted_choi_is_trace_preserving_and_positive() {
    let ns = NoiseSpec::thermal(0.2, 0.5)
        .unwrap()
        .with_gamma(0.1)
        .unwrap();
    for (n, arity) in [(3, 1), (4, 1), (3, 2)] {
        let choi = evolve::extract_channel(
            &full_job(n, ns),
            &ProbeConfig::default_for(arity, n).unwrap(),
        )
        .unwrap();
        assert!(choi.marginal_deviation().unwrap() < 1e-7);
        assert!(choi.state().min_eigenvalue() > -1e-9);
        assert!((choi.matrix().trace().re - 1.0).abs() < 1e-9);
    }
}

#[test]
fn apply_channel_reproduces_direct_evolution() {
    let mut r = ChaCha8Rng::seed_from_u64(26);
    let n = 3;
    let ns = NoiseSpec::thermal(0.3, 1.0)
        .unwrap()
        .with_gamma(0.05)
        .unwrap();
    let job = full_job(n, ns);
    for sites in [vec![1], vec![1, 3]] {
        let probe = ProbeConfig::new(sites.clone(), n).unwrap();
        let choi = evolve::extract_channel(&job, &probe).unwrap();
        let out_pos: Vec<usize> = probe.output_sites(n).iter().map(|s| s - 1).collect();
        for _ in 0..10 {
            let rho_in = numkit::random_density_matrix(&mut r, vec![2; sites.len()]);
            let rho0 = full_state(embed(rho_in.matrix(), n, &sites), n);
            let direct = evolve::evolve_state(&job, &rho0).unwrap();
            let want = common::reduce(direct.matrix(), n, &out_pos);
            let got = evolve::apply_channel(&choi, &rho_in).unwrap();
            assert!(max_abs_diff(got.matrix(), &want) < 1e-7, "{sites:?}");
        }
    }
}

#[test]
fn apply_channel_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(27);
    let id = ChoiState::from_unitary(&numkit::identity(2)).unwrap();
    let rho = numkit::random_density_matrix(&mut r, vec![2]);
    let out = evolve::apply_channel(&id, &rho).unwrap();
    assert!(max_abs_diff(out.matrix(), rho.matrix()) < 1e-14);
    let flip = ChoiState::from_unitary(&numkit::pauli_x()).unwrap();
    let out = evolve::apply_channel(&flip, &DensityMatrix::basis_state(0, vec![2])).unwrap();
    assert!(
        max_abs_diff(
            out.matrix(),
            DensityMatrix::basis_state(1, vec![2]).matrix()
        ) < 1e-14
    );
    let wrong = DensityMatrix::maximally_mixed(vec![2, 2]);
    assert!(evolve::apply_channel(&flip, &wrong).is_err());
}

#[test]
fn kraus_from_choi() {
    let id = ChoiState::from_unitary(&numkit::identity(2)).unwrap();
    let k = evolve::choi_to_kraus(&id).unwrap();
    assert_eq!(k.operators().len(), 1);
    let e = &k.operators()[0];
    let phase = e[(0, 0)];
    assert!(
        max_abs_diff(e, &(numkit::identity(2) * phase)) < 1e-12
            && (phase.norm() - 1.0).abs() < 1e-12
    );

    let kt = 0.8f64;
    let p3 = 0.25 * (1.0 - (-kt).exp());
    let dep = AnalyticChannel::new(NoiseSpec::depolarizing(1.0).unwrap(), kt).unwrap();
    let choi = ChoiState::from_kraus(&noise::kraus_set(&dep)).unwrap();
    let k = evolve::choi_to_kraus(&choi).unwrap();
    let mut weights: Vec<f64> = k
        .operators()
        .iter()
        .map(|e| (e.adjoint() * e).trace().re / 2.0)
        .collect();
    weights.sort_by(f64::total_cmp);
    let want = [p3, p3, p3, 1.0 - 3.0 * p3];
    for (w, x) in weights.iter().zip(want) {
        assert!((w - x).abs() < 1e-12);
    }

    let mut r = ChaCha8Rng::seed_from_u64(28);
    let ns = NoiseSpec::custom(0.1, 0.2, 0.3).unwrap();
    let choi = evolve::extract_channel(&full_job(3, ns), &ProbeConfig::default_for(2, 3).unwrap())
        .unwrap();
    let k = evolve::choi_to_kraus(&choi).unwrap();
    for _ in 0..10 {
        let rho = numkit::random_density_matrix(&mut r, vec![2, 2]);
        let a = k.apply(rho.matrix());
        let b = evolve::apply_channel(&choi, &rho).unwrap();
        assert!(max_abs_diff(&a, b.matrix()) < 1e-8);
    }
}

#[test]
fn integrators_agree() {
    let mut r = ChaCha8Rng::seed_from_u64(29);
    let ns = NoiseSpec::depolarizing(0.3).unwrap();
    let rho = numkit::random_density_matrix(&mut r, vec![2; 4]);
    let mut outs: Vec<M> = Vec::new();
    for method in [
        Method::AdaptiveRkf78,
        Method::AdaptiveDp5,
        Method::Rk4Richardson,
    ] {
        let settings = IntegratorSettings {
            method,
            ..IntegratorSettings::default()
        };
        let job = full_job(4, ns).with_integrator(settings);
        outs.push(evolve::evolve_state(&job, &rho).unwrap().matrix().clone());
    }
    assert!(max_abs_diff(&outs[0], &outs[1]) < 1e-8);
    assert!(max_abs_diff(&outs[0], &outs[2]) < 1e-8);
}

#[test]
fn step_budget_exhaustion_is_reported() {
    let settings = IntegratorSettings {
        max_steps: 3,
        fallback: false,
        ..IntegratorSettings::default()
    };
    let job = full_job(3, NoiseSpec::depolarizing(0.3).unwrap()).with_integrator(settings);
    let rho = DensityMatrix::maximally_mixed(vec![2; 3]);
    let rho = DensityMatrix::pure(&numkit::plus_state(3), vec![2; 3]).unwrap_or(rho);
    match evolve::evolve_state(&job, &rho) {
        Err(EvolveError::StepUnderflow { t_reached }) => assert!(t_reached < PI),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn representation_and_probe_errors() {
    let th = NoiseSpec::thermal(0.1, 1.0).unwrap();
    assert!(matches!(
        full_job(3, th).with_representation(Representation::Sector { max_n: 2 }),
        Err(EvolveError::Representation(_))
    ));
    assert_eq!(Representation::auto(&th, 2), Representation::FullSpace);
    assert_eq!(
        Representation::auto(&NoiseSpec::decay(0.1).unwrap(), 2),
        Representation::Sector { max_n: 2 }
    );
    let one = full_job(3, NoiseSpec::decay(0.1).unwrap())
        .with_representation(Representation::Sector { max_n: 1 })
        .unwrap();
    assert!(matches!(
        evolve::extract_channel(&one, &ProbeConfig::default_for(2, 3).unwrap()),
        Err(EvolveError::Representation(_))
    ));
    let wrong = DensityMatrix::maximally_mixed(vec![2; 2]);
    assert!(matches!(
        evolve::evolve_state(&full_job(3, th), &wrong),
        Err(EvolveError::StateMismatch { .. })
    ));
    assert!(ProbeConfig::default_for(2, 1).is_err());
    assert!(full_job(3, th).with_duration(-1.0).is_err());
    let _ = Operator::single(numkit::identity(2)).unwrap();
}
