//! Sweep orchestration: grid points are evaluated on a bounded worker pool
//! and merged back in grid order, so output never depends on scheduling.

use std::time::Instant;

use rayon::prelude::*;
use spinbus::analyze::{self, AnalyzeError, FitData, NoiseModel, ThresholdOptions};
use spinbus::chain::ChainSpec;
use spinbus::evolve::{self, EvolutionJob, ProbeConfig, Representation};
use spinbus::graphgen;
use spinbus::numkit::ChoiState;

use crate::config::{FitModelName, GridParam, Metric, RepresentationMode, SweepConfig};
use crate::table::{Cell, Failure, Table};

type PointResult = Result<Vec<Cell>, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    ChannelSweep,
    GateSweep,
    Thresholds,
    Fit,
    PacketModel,
    GraphGen,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ChannelSweep => "channel-sweep",
            Command::GateSweep => "gate-sweep",
            Command::Thresholds => "thresholds",
            Command::Fit => "fit",
            Command::PacketModel => "packet-model",
            Command::GraphGen => "graph-gen",
        }
    }

    /// Probe arity implied by the subcommand.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Command::ChannelSweep | Command::Fit => Some(1),
            Command::GateSweep => Some(2),
            _ => None,
        }
    }
}

/// Sets the probe arity from the subcommand when the sites are left at
/// their default.
pub fn apply_command(cmd: Command, cfg: &mut SweepConfig) {
    if let (Some(a), None) = (cmd.arity(), &cfg.sites) {
        cfg.arity = a;
    }
}

/// Checks that depend on the subcommand, done before any computation.
pub fn check_command(cmd: Command, cfg: &SweepConfig) -> Result<(), String> {
    match cmd {
        Command::ChannelSweep if cfg.arity != 1 => {
            Err("probe.arity: channel-sweep needs arity 1".into())
        }
        Command::GateSweep if cfg.arity != 2 => Err("probe.arity: gate-sweep needs arity 2".into()),
        Command::Fit if cfg.arity != 1 => Err("probe.arity: fit needs arity 1".into()),
        Command::Fit if cfg.grid.len() < 8 => {
            Err("grid.values: fit needs at least 8 points".into())
        }
        Command::Fit => {
            let want = match cfg.fit_model {
                FitModelName::ThermalDephasing => GridParam::Temperature,
                _ => GridParam::Kappa,
            };
            if cfg.grid_param != want {
                Err(format!(
                    "grid.param: this fit model needs a {} grid",
                    want.name()
                ))
            } else {
                Ok(())
            }
        }
        Command::Thresholds if cfg.grid_param != GridParam::Kappa => {
            Err("grid.param: thresholds scan κ; use grid.param = kappa".into())
        }
        Command::GraphGen if cfg.chain_n.len() != 1 => {
            Err("chain.N: graph-gen takes a single chain length".into())
        }
        Command::GraphGen if cfg.grid_param != GridParam::Kappa => {
            Err("grid.param: graph-gen sweeps κ".into())
        }
        Command::GraphGen if 2 * cfg.graph_n > cfg.chain_n[0] => Err(format!(
            "graph.n: {} qubits need a chain of at least {} sites",
            cfg.graph_n,
            2 * cfg.graph_n
        )),
        _ => Ok(()),
    }
}

pub fn run(cmd: Command, cfg: &SweepConfig, workers: usize) -> Result<Table, String> {
    check_command(cmd, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| e.to_string())?;
    Ok(pool.install(|| match cmd {
        Command::ChannelSweep | Command::GateSweep => metric_sweep(cfg),
        Command::Thresholds => thresholds(cfg),
        Command::Fit => fit(cfg),
        Command::PacketModel => packet_model(cfg),
        Command::GraphGen => graph_gen(cfg),
    }))
}

/// Evaluate `points` in parallel; a failed point becomes a row of empty
/// cells after `keys` and is listed in the failures.
fn evaluate<P: Sync>(
    columns: &[&'static str],
    points: &[P],
    keys: impl Fn(&P) -> Vec<Cell> + Sync,
    describe: impl Fn(&P) -> String + Sync,
    eval: impl Fn(&P) -> PointResult + Sync,
) -> Table {
    let results: Vec<PointResult> = points.par_iter().map(&eval).collect();
    let mut table = Table::new(columns);
    for (index, (p, r)) in points.iter().zip(results).enumerate() {
        let mut row = keys(p);
        match r {
            Ok(cells) => row.extend(cells),
            Err(error) => {
                log::warn!("{}: {error}", describe(p));
                row.resize(columns.len(), Cell::Empty);
                table.failures.push(Failure {
                    index,
                    point: describe(p),
                    error,
                });
            }
        }
        table.rows.push(row);
    }
    table
}

fn chain(cfg: &SweepConfig, n: usize) -> Result<ChainSpec, String> {
    ChainSpec::new(n, cfg.j, cfg.delta_over_j).map_err(|e| e.to_string())
}

fn extract(cfg: &SweepConfig, n: usize, value: f64) -> Result<(ChoiState, Vec<usize>), String> {
    let noise = cfg.noise_at(value).map_err(|e| e.to_string())?;
    let sites = cfg.probe_sites(n)?;
    let rep = match cfg.representation {
        RepresentationMode::Auto => Representation::auto(&noise, sites.len()),
        RepresentationMode::Full => Representation::FullSpace,
        RepresentationMode::Sector => Representation::Sector { max_n: sites.len() },
    };
    let mut job = EvolutionJob::new(chain(cfg, n)?, noise)
        .with_representation(rep)
        .map_err(|e| e.to_string())?;
    job.integrator.rtol = cfg.rtol;
    job.integrator.atol = cfg.atol;
    let probe = ProbeConfig::new(sites.clone(), n).map_err(|e| e.to_string())?;
    let choi = evolve::extract_channel(&job, &probe).map_err(|e| e.to_string())?;
    Ok((choi, sites))
}

fn grid_points(cfg: &SweepConfig) -> Vec<(usize, f64)> {
    cfg.chain_n
        .iter()
        .flat_map(|&n| cfg.grid.iter().map(move |&v| (n, v)))
        .collect()
}

fn metric_sweep(cfg: &SweepConfig) -> Table {
    let wants = |m: Metric| cfg.metrics.contains(&m);
    evaluate(
        &[
            "N",
            "param_name",
            "param_value",
            "avg_fidelity",
            "eps_min",
            "breaking",
            "f_plus_plus",
            "wall_ms",
        ],
        &grid_points(cfg),
        |&(n, v)| {
            vec![
                Cell::Int(n as i64),
                Cell::Text(cfg.grid_param.name().into()),
                Cell::Float(v),
            ]
        },
        |&(n, v)| format!("N={n} {}={v}", cfg.grid_param.name()),
        |&(n, v)| {
            let start = Instant::now();
            let (choi, sites) = extract(cfg, n, v)?;
            let target =
                analyze::ideal_target(&chain(cfg, n)?, &sites).map_err(|e| e.to_string())?;
            let m = analyze::channel_metrics(&choi, &target).map_err(|e| e.to_string())?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let eps = wants(Metric::EpsMin);
            Ok(vec![
                Cell::opt_float(wants(Metric::AvgFidelity).then_some(m.avg_fidelity)),
                Cell::opt_float(eps.then_some(m.eps_min)),
                if eps {
                    Cell::Bool(m.breaking)
                } else {
                    Cell::Empty
                },
                Cell::opt_float(m.f_plus_plus.filter(|_| wants(Metric::FPlusPlus))),
                Cell::opt_float(cfg.timings.then_some(ms)),
            ])
        },
    )
}

fn thresholds(cfg: &SweepConfig) -> Table {
    let opts = ThresholdOptions::default();
    let (lo, hi) = (cfg.threshold_lo, cfg.threshold_hi);
    evaluate(
        &["N", "kappa_f", "kappa_c"],
        &cfg.chain_n,
        |&n| vec![Cell::Int(n as i64)],
        |&n| format!("N={n}"),
        |&n| {
            let sites = cfg.probe_sites(n)?;
            let target =
                analyze::ideal_target(&chain(cfg, n)?, &sites).map_err(|e| e.to_string())?;
            let choi_at = |k: f64| {
                extract(cfg, n, k)
                    .map(|(c, _)| c)
                    .map_err(AnalyzeError::InvalidInput)
            };
            let kf = analyze::find_threshold(
                |k| analyze::avg_fidelity(&choi_at(k)?, &target),
                0.99,
                lo,
                hi,
                opts,
            );
            let kc = analyze::find_threshold(
                |k| analyze::ppt_min_eigenvalue(&choi_at(k)?),
                0.0,
                lo,
                hi,
                opts,
            );
            // No crossing inside the bracket is a result, not a failure.
            let cell = |r: analyze::Result<f64>| match r {
                Ok(v) => Ok(Cell::Float(v)),
                Err(AnalyzeError::NoSignChange { .. }) => Ok(Cell::Empty),
                Err(e) => Err(e.to_string()),
            };
            Ok(vec![cell(kf)?, cell(kc)?])
        },
    )
}

fn fit(cfg: &SweepConfig) -> Table {
    let model = match cfg.fit_model {
        FitModelName::DephasingDecay => NoiseModel::DephasingDecay,
        FitModelName::ThermalDephasing => NoiseModel::ThermalDephasing {
            kappa: cfg.kappa.unwrap_or(0.0) * cfg.j,
        },
        FitModelName::Depolarizing => NoiseModel::Depolarizing,
    };
    evaluate(
        &[
            "N",
            "model",
            "zeta1",
            "zeta2",
            "residual",
            "choi_infidelity",
        ],
        &cfg.chain_n,
        |&n| vec![Cell::Int(n as i64), Cell::Text(model.name().into())],
        |&n| format!("N={n}"),
        |&n| {
            let spec = chain(cfg, n)?;
            let target =
                analyze::ideal_target(&spec, &cfg.probe_sites(n)?).map_err(|e| e.to_string())?;
            let chois: Vec<ChoiState> = cfg
                .grid
                .par_iter()
                .map(|&v| extract(cfg, n, v).map(|(c, _)| c))
                .collect::<Result<_, _>>()?;
            let fidelities = chois
                .iter()
                .map(|c| analyze::avg_fidelity(c, &target))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let data = FitData {
                grid: cfg.grid.clone(),
                fidelities,
                chois: Some(chois),
                t: spec.inversion_time() * spec.j(),
            };
            let r = analyze::fit_noise_model(&data, model).map_err(|e| e.to_string())?;
            Ok(vec![
                Cell::Float(r.params[0]),
                Cell::opt_float(r.params.get(1).copied()),
                Cell::Float(r.residual),
                Cell::opt_float(r.max_choi_infidelity),
            ])
        },
    )
}

fn packet_model(cfg: &SweepConfig) -> Table {
    evaluate(
        &["N", "kappa", "sum_fs", "kappa_c", "p_total"],
        &grid_points(cfg),
        |&(n, k)| vec![Cell::Int(n as i64), Cell::Float(k)],
        |&(n, k)| format!("N={n} kappa={k}"),
        |&(n, k)| {
            let pm = analyze::packet_model(&chain(cfg, n)?, k).map_err(|e| e.to_string())?;
            Ok(vec![
                Cell::Float(pm.sum_fs),
                Cell::Float(pm.kappa_c_over_j),
                Cell::Float(pm.p_total),
            ])
        },
    )
}

fn graph_gen(cfg: &SweepConfig) -> Table {
    let n = cfg.chain_n[0];
    let points: Vec<_> = cfg
        .schemes
        .iter()
        .flat_map(|&s| {
            cfg.graphs
                .iter()
                .flat_map(move |&g| cfg.grid.iter().map(move |&k| (s, g, k)))
        })
        .collect();
    evaluate(
        &["scheme", "graph", "kappa", "F_g"],
        &points,
        |&(s, g, k)| {
            vec![
                Cell::Text(s.name().into()),
                Cell::Text(g.name().into()),
                Cell::Float(k),
            ]
        },
        |&(s, g, k)| format!("scheme={} graph={} kappa={k}", s.name(), g.name()),
        |&(s, g, k)| {
            let graph = g.build(cfg.graph_n).map_err(|e| e.to_string())?;
            let noise = cfg.noise_at(k).map_err(|e| e.to_string())?;
            let r = graphgen::build_graph_state_noisy(&graph, &chain(cfg, n)?, &noise, s)
                .map_err(|e| e.to_string())?;
            Ok(vec![Cell::Float(r.fidelity)])
        },
    )
}
