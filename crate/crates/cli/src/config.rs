//! Flat `key = value` sweep configuration with dotted keys.
//!
//! ```text
//! # comment
//! chain.N = 2,4,8
//! noise.preset = thermal
//! grid.param = T
//! grid.values = 0.1,0.2,0.4
//! noise.kappa = 0.02
//! ```
//!
//! Lists are comma separated. [`SweepConfig::emit`] writes every key in a
//! fixed order, so `parse(emit(c)) == c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use spinbus::chain::ChainSpec;
use spinbus::graphgen::{GraphSpec, Scheme};
use spinbus::noise::{NoisePreset, NoiseSpec};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepresentationMode {
    Auto,
    Full,
    Sector,
}

impl RepresentationMode {
    fn name(&self) -> &'static str {
        match self {
            RepresentationMode::Auto => "auto",
            RepresentationMode::Full => "full",
            RepresentationMode::Sector => "sector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridParam {
    /// κ/J
    Kappa,
    /// T/Δ
    Temperature,
}

impl GridParam {
    pub fn name(&self) -> &'static str {
        match self {
            GridParam::Kappa => "kappa",
            GridParam::Temperature => "T",
        }
    }
}

/// A probe site, either fixed or counted from the far end of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteRef {
    Index(usize),
    /// `N` (0) or `N-k` (k)
    FromEnd(usize),
}

impl SiteRef {
    pub fn resolve(&self, n: usize) -> Option<usize> {
        match *self {
            SiteRef::Index(s) => (1..=n).contains(&s).then_some(s),
            SiteRef::FromEnd(k) => (k < n).then_some(n - k),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "N" {
            return Some(SiteRef::FromEnd(0));
        }
        if let Some(k) = s.strip_prefix("N-") {
            return k.parse().ok().map(SiteRef::FromEnd);
        }
        s.parse().ok().map(SiteRef::Index)
    }

    fn emit(&self) -> String {
        match self {
            SiteRef::Index(s) => s.to_string(),
            SiteRef::FromEnd(0) => "N".into(),
            SiteRef::FromEnd(k) => format!("N-{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    AvgFidelity,
    EpsMin,
    FPlusPlus,
}

impl Metric {
    fn name(&self) -> &'static str {
        match self {
            Metric::AvgFidelity => "avg_fidelity",
            Metric::EpsMin => "eps_min",
            Metric::FPlusPlus => "f_plus_plus",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "avg_fidelity" => Metric::AvgFidelity,
            "eps_min" => Metric::EpsMin,
            "f_plus_plus" => Metric::FPlusPlus,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModelName {
    DephasingDecay,
    ThermalDephasing,
    Depolarizing,
}

impl FitModelName {
    fn name(&self) -> &'static str {
        match self {
            FitModelName::DephasingDecay => "dephasing-decay",
            FitModelName::ThermalDephasing => "thermal-dephasing",
            FitModelName::Depolarizing => "depolarizing",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dephasing-decay" => FitModelName::DephasingDecay,
            "thermal-dephasing" => FitModelName::ThermalDephasing,
            "depolarizing" => FitModelName::Depolarizing,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphPreset {
    Cluster,
    Ghz,
}

impl GraphPreset {
    pub fn name(&self) -> &'static str {
        match self {
            GraphPreset::Cluster => "cluster",
            GraphPreset::Ghz => "ghz",
        }
    }

    pub fn build(&self, n: usize) -> spinbus::graphgen::Result<GraphSpec> {
        match self {
            GraphPreset::Cluster => GraphSpec::linear_cluster(n),
            GraphPreset::Ghz => GraphSpec::ghz_star(n),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cluster" => GraphPreset::Cluster,
            "ghz" => GraphPreset::Ghz,
            _ => return None,
        })
    }
}

fn scheme_parse(s: &str) -> Option<Scheme> {
    match s {
        "i" => Some(Scheme::Sequential),
        "ii" => Some(Scheme::Closest),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub chain_n: Vec<usize>,
    pub j: f64,
    pub delta_over_j: f64,
    pub preset: NoisePreset,
    pub grid_param: GridParam,
    pub grid: Vec<f64>,
    /// κ/J when the grid runs over temperature.
    pub kappa: Option<f64>,
    /// T/Δ of thermal noise when the grid runs over κ.
    pub temperature: Option<f64>,
    pub arity: usize,
    /// Probe sites; `None` means site 1 (arity 1) or sites 1 and N (arity 2).
    pub sites: Option<Vec<SiteRef>>,
    pub representation: RepresentationMode,
    pub metrics: Vec<Metric>,
    pub rtol: f64,
    pub atol: f64,
    pub workers: usize,
    pub seed: u64,
    pub timings: bool,
    pub threshold_lo: f64,
    pub threshold_hi: f64,
    pub fit_model: FitModelName,
    pub graph_n: usize,
    pub graphs: Vec<GraphPreset>,
    pub schemes: Vec<Scheme>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            chain_n: vec![5],
            j: 1.0,
            delta_over_j: 2.0,
            preset: NoisePreset::Decay,
            grid_param: GridParam::Kappa,
            grid: vec![0.0],
            kappa: None,
            temperature: None,
            arity: 1,
            sites: None,
            representation: RepresentationMode::Auto,
            metrics: vec![Metric::AvgFidelity, Metric::EpsMin, Metric::FPlusPlus],
            rtol: 1e-9,
            atol: 1e-12,
            workers: 1,
            seed: 0,
            timings: false,
            threshold_lo: 1e-4,
            threshold_hi: 0.5,
            fit_model: FitModelName::DephasingDecay,
            graph_n: 5,
            graphs: vec![GraphPreset::Cluster, GraphPreset::Ghz],
            schemes: vec![Scheme::Sequential, Scheme::Closest],
        }
    }
}

fn list<T>(key: &'static str, v: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            let s = s.trim();
            item(s).ok_or_else(|| invalid(key, format!("cannot parse `{s}`")))
        })
        .collect()
}

fn float(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| !v.is_nan())
}

fn one<T>(key: &'static str, v: &str, item: impl Fn(&str) -> Option<T>) -> Result<T> {
    item(v.trim()).ok_or_else(|| invalid(key, format!("cannot parse `{v}`")))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn increasing<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: k + 1 })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: k + 1 });
            }
            if pairs.contains_key(&key) {
                return Err(ConfigError::Duplicate { line: k + 1, key });
            }
            pairs.insert(key, (k + 1, value.trim().to_string()));
        }
        let mut c = SweepConfig::default();
        for (key, (_, v)) in &pairs {
            let v = v.as_str();
            match key.as_str() {
                "chain.N" => c.chain_n = list("chain.N", v, |s| s.parse().ok())?,
                "chain.J" => c.j = one("chain.J", v, float)?,
                "chain.delta_over_J" => c.delta_over_j = one("chain.delta_over_J", v, float)?,
                "noise.preset" => c.preset = one("noise.preset", v, NoisePreset::parse)?,
                "noise.kappa" => c.kappa = opt(v, "noise.kappa")?,
                "noise.T" => c.temperature = opt(v, "noise.T")?,
                "grid.param" => {
                    c.grid_param = one("grid.param", v, |s| match s {
                        "kappa" => Some(GridParam::Kappa),
                        "T" => Some(GridParam::Temperature),
                        _ => None,
                    })?
                }
                "grid.values" => c.grid = list("grid.values", v, float)?,
                "probe.arity" => c.arity = one("probe.arity", v, |s| s.parse().ok())?,
                "probe.sites" => {
                    c.sites = if v == "default" {
                        None
                    } else {
                        Some(list("probe.sites", v, SiteRef::parse)?)
                    }
                }
                "representation" => {
                    c.representation = one("representation", v, |s| match s {
                        "auto" => Some(RepresentationMode::Auto),
                        "full" => Some(RepresentationMode::Full),
                        "sector" => Some(RepresentationMode::Sector),
                        _ => None,
                    })?
                }
                "metrics" => c.metrics = list("metrics", v, Metric::parse)?,
                "integrator.rtol" => c.rtol = one("integrator.rtol", v, float)?,
                "integrator.atol" => c.atol = one("integrator.atol", v, float)?,
                "run.workers" => c.workers = one("run.workers", v, |s| s.parse().ok())?,
                "run.seed" => c.seed = one("run.seed", v, |s| s.parse().ok())?,
                "output.timings" => c.timings = one("output.timings", v, |s| s.parse().ok())?,
                "thresholds.lo" => c.threshold_lo = one("thresholds.lo", v, float)?,
                "thresholds.hi" => c.threshold_hi = one("thresholds.hi", v, float)?,
                "fit.model" => c.fit_model = one("fit.model", v, FitModelName::parse)?,
                "graph.n" => c.graph_n = one("graph.n", v, |s| s.parse().ok())?,
                "graph.presets" => c.graphs = list("graph.presets", v, GraphPreset::parse)?,
                "graph.schemes" => c.schemes = list("graph.schemes", v, scheme_parse)?,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; every key is written.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("chain.N", join(&self.chain_n, |n| n.to_string()));
        put("chain.J", self.j.to_string());
        put("chain.delta_over_J", self.delta_over_j.to_string());
        put("noise.preset", self.preset.name().into());
        put("noise.kappa", emit_opt(self.kappa));
        put("noise.T", emit_opt(self.temperature));
        put("grid.param", self.grid_param.name().into());
        put("grid.values", join(&self.grid, |v| v.to_string()));
        put("probe.arity", self.arity.to_string());
        put(
            "probe.sites",
            match &self.sites {
                None => "default".into(),
                Some(s) => join(s, SiteRef::emit),
            },
        );
        put("representation", self.representation.name().into());
        put("metrics", join(&self.metrics, |m| m.name().into()));
        put("integrator.rtol", self.rtol.to_string());
        put("integrator.atol", self.atol.to_string());
        put("run.workers", self.workers.to_string());
        put("run.seed", self.seed.to_string());
        put("output.timings", self.timings.to_string());
        put("thresholds.lo", self.threshold_lo.to_string());
        put("thresholds.hi", self.threshold_hi.to_string());
        put("fit.model", self.fit_model.name().into());
        put("graph.n", self.graph_n.to_string());
        put("graph.presets", join(&self.graphs, |g| g.name().into()));
        put("graph.schemes", join(&self.schemes, |s| s.name().into()));
        s
    }

    /// Flat key → value map, as written by [`Self::emit`].
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.emit()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain_n.is_empty() || !increasing(&self.chain_n) {
            return Err(invalid(
                "chain.N",
                "must be nonempty and strictly increasing",
            ));
        }
        if self.chain_n[0] == 0 {
            return Err(invalid("chain.N", "lengths must be positive"));
        }
        for &n in &self.chain_n {
            ChainSpec::new(n, self.j, self.delta_over_j)
                .map_err(|e| invalid("chain.N", e.to_string()))?;
        }
        if self.grid.is_empty() || !increasing(&self.grid) {
            return Err(invalid(
                "grid.values",
                "must be nonempty and strictly increasing",
            ));
        }
        if self.grid.iter().any(|v| *v < 0.0) {
            return Err(invalid("grid.values", "values must be non-negative"));
        }
        if self.preset == NoisePreset::Custom {
            return Err(invalid(
                "noise.preset",
                "custom rates are not available in sweeps",
            ));
        }
        match self.grid_param {
            GridParam::Temperature => {
                if self.preset != NoisePreset::Thermal {
                    return Err(invalid(
                        "grid.param",
                        "a T grid needs noise.preset = thermal",
                    ));
                }
                if self.kappa.is_none() {
                    return Err(invalid("noise.kappa", "required when grid.param = T"));
                }
            }
            GridParam::Kappa => {
                if self.temperature.is_some() && self.preset != NoisePreset::Thermal {
                    return Err(invalid("noise.T", "only thermal noise has a temperature"));
                }
            }
        }
        for (key, v) in [("noise.kappa", self.kappa), ("noise.T", self.temperature)] {
            if v.is_some_and(|v| v < 0.0) {
                return Err(invalid(key, "must be non-negative"));
            }
        }
        if !(1..=2).contains(&self.arity) {
            return Err(invalid("probe.arity", "must be 1 or 2"));
        }
        if let Some(sites) = &self.sites {
            if sites.len() != self.arity {
                return Err(invalid("probe.sites", "one site per probe qubit"));
            }
        }
        for &n in &self.chain_n {
            self.probe_sites(n)
                .map_err(|m| invalid("probe.sites", format!("N={n}: {m}")))?;
        }
        if self.representation == RepresentationMode::Sector
            && !self
                .noise_at(self.grid[self.grid.len() - 1])
                .map(|ns| ns.preserves_low_sectors())
                .unwrap_or(false)
        {
            return Err(invalid(
                "representation",
                "sector representation needs noise that never creates excitations",
            ));
        }
        if self.metrics.is_empty() {
            return Err(invalid("metrics", "at least one metric"));
        }
        for (key, v) in [
            ("integrator.rtol", self.rtol),
            ("integrator.atol", self.atol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.workers == 0 {
            return Err(invalid("run.workers", "must be at least 1"));
        }
        if !(self.threshold_lo > 0.0 && self.threshold_lo < self.threshold_hi) {
            return Err(invalid("thresholds.lo", "need 0 < lo < hi"));
        }
        if self.graphs.is_empty() || self.schemes.is_empty() {
            return Err(invalid(
                "graph.presets",
                "need at least one graph and scheme",
            ));
        }
        if !(2..=5).contains(&self.graph_n) {
            return Err(invalid("graph.n", "must be in 2..=5"));
        }
        Ok(())
    }

    /// Resolved probe sites for chain length `n`.
    pub fn probe_sites(&self, n: usize) -> std::result::Result<Vec<usize>, String> {
        let sites: Vec<usize> = match &self.sites {
            None if self.arity == 1 => vec![1],
            None => vec![1, n],
            Some(s) => s
                .iter()
                .map(|r| {
                    r.resolve(n)
                        .ok_or_else(|| format!("{} outside chain", r.emit()))
                })
                .collect::<std::result::Result<_, _>>()?,
        };
        if sites.len() == 2 && sites[0] == sites[1] {
            return Err(format!("site {} repeated", sites[0]));
        }
        Ok(sites)
    }

    /// Noise at one grid value (rates in units of J).
    pub fn noise_at(&self, value: f64) -> spinbus::noise::Result<NoiseSpec> {
        let (kappa, temperature) = match self.grid_param {
            GridParam::Kappa => (value, self.temperature),
            GridParam::Temperature => (self.kappa.unwrap_or(0.0), Some(value)),
        };
        NoiseSpec::from_preset(self.preset, kappa * self.j, temperature)
    }
}

fn opt(v: &str, key: &'static str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        one(key, v, float).map(Some)
    }
}

fn emit_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}
