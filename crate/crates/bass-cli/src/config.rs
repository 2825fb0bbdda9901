//! Experiment configuration: a flat key-value format with sections.
//!
//! ```text
//! [topology]
//! kind = two_stars
//! n = 9
//!
//! [schedule]
//! scheduler = bass_optimized
//! budget = 50%
//!
//! [train]
//! iters = 500
//! seed = 1
//! ```
//!
//! Unknown sections or keys, malformed values, and missing required fields
//! are rejected with the offending line number. `parse(write(cfg))`
//! reproduces `cfg` exactly.

use std::fmt::Write as _;
use std::path::Path;

use bass_core::graph::{ColoringOrder, TopologyKind};
use bass_core::optimizer::InitKind;
use bass_core::simulator::{LrSchedule, TaskKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("missing required key '{0}'")]
    Missing(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn line_err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Line {
        line,
        message: message.into(),
    }
}

/// Where the base topology comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Generated {
        kind: TopologyKind,
        n: usize,
        param: f64,
    },
    File(String),
}

/// Communication budget: absolute slots or a percentage of the number of
/// collision-free subsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    Slots(usize),
    Percent(f64),
}

impl BudgetSpec {
    /// Resolve against a partition size: percentages round to the nearest
    /// slot count, clamped to [1, q].
    pub fn resolve(&self, q: usize) -> Result<usize, ConfigError> {
        let slots = match *self {
            BudgetSpec::Slots(b) => b,
            BudgetSpec::Percent(p) => (q as f64 * p / 100.0).round().max(1.0) as usize,
        };
        if slots == 0 || slots > q {
            return Err(ConfigError::Invalid(format!(
                "budget {slots} outside [1, {q}]"
            )));
        }
        Ok(slots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    BassOptimized,
    BassHeuristic,
    Matching,
    FullComm,
}

impl SchedulerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchedulerKind::BassOptimized => "bass_optimized",
            SchedulerKind::BassHeuristic => "bass_heuristic",
            SchedulerKind::Matching => "matching",
            SchedulerKind::FullComm => "full_comm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitChoice {
    Connectivity,
    Weighted,
    Both,
}

impl InitChoice {
    pub fn kinds(&self) -> Vec<InitKind> {
        match self {
            InitChoice::Connectivity => vec![InitKind::ConnectivityEpsilon],
            InitChoice::Weighted => vec![InitKind::WeightedLaplacian],
            InitChoice::Both => vec![InitKind::ConnectivityEpsilon, InitKind::WeightedLaplacian],
        }
    }
}

/// Fully parsed experiment configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // [topology]
    pub topology: TopologySpec,
    // [schedule]
    pub scheduler: SchedulerKind,
    pub budget: BudgetSpec,
    pub fail_prob: f64,
    // [optimizer]
    pub outer_iters: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub init: InitChoice,
    pub keep_candidates: usize,
    pub coloring_order: ColoringOrder,
    // [task]
    pub task_kind: TaskKind,
    pub dim: usize,
    pub samples_per_node: usize,
    pub heterogeneity: f64,
    pub batch_size: usize,
    // [train]
    pub iters: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    pub threads: usize,
    // [output]
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: TopologySpec::Generated {
                kind: TopologyKind::TwoStars,
                n: 9,
                param: 0.0,
            },
            scheduler: SchedulerKind::BassOptimized,
            budget: BudgetSpec::Percent(50.0),
            fail_prob: 0.0,
            outer_iters: 5,
            tol: 1e-6,
            max_iters: 5000,
            init: InitChoice::Both,
            keep_candidates: 0,
            coloring_order: ColoringOrder::AuxDegreeDesc,
            task_kind: TaskKind::LeastSquares,
            dim: 10,
            samples_per_node: 40,
            heterogeneity: 0.5,
            batch_size: 0,
            iters: 500,
            lr: 0.25,
            lr_decay: 0.5,
            lr_decay_every: 200,
            lr_milestones: Vec::new(),
            seed: 1,
            threads: 0,
            out_dir: "out".to_string(),
        }
    }
}

impl ExperimentConfig {
    /// Learning-rate schedule implied by the `[train]` settings.
    pub fn lr_schedule(&self) -> LrSchedule {
        if !self.lr_milestones.is_empty() {
            LrSchedule::Milestones {
                initial: self.lr,
                factor: self.lr_decay,
                at: self.lr_milestones.clone(),
            }
        } else if self.lr_decay == 1.0 {
            LrSchedule::Constant(self.lr)
        } else {
            LrSchedule::Step {
                initial: self.lr,
                factor: self.lr_decay,
                every: self.lr_decay_every,
            }
        }
    }

    /// Canonical serialization; parsing it reproduces this configuration.
    pub fn write(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[topology]");
        match &self.topology {
            TopologySpec::Generated { kind, n, param } => {
                let kind = match kind {
                    TopologyKind::Geometric => "geometric",
                    TopologyKind::ErdosRenyi => "erdos_renyi",
                    TopologyKind::TwoStars => "two_stars",
                    TopologyKind::Forest => "forest",
                };
                let _ = writeln!(out, "kind = {kind}");
                let _ = writeln!(out, "n = {n}");
                let _ = writeln!(out, "param = {param}");
            }
            TopologySpec::File(path) => {
                let _ = writeln!(out, "kind = file");
                let _ = writeln!(out, "file = {path}");
            }
        }
        let _ = writeln!(out, "\n[schedule]");
        let _ = writeln!(out, "scheduler = {}", self.scheduler.as_str());
        match self.budget {
            BudgetSpec::Slots(b) => {
                let _ = writeln!(out, "budget = {b}");
            }
            BudgetSpec::Percent(p) => {
                let _ = writeln!(out, "budget = {p}%");
            }
        }
        let _ = writeln!(out, "fail_prob = {}", self.fail_prob);
        let _ = writeln!(out, "\n[optimizer]");
        let _ = writeln!(out, "outer_iters = {}", self.outer_iters);
        let _ = writeln!(out, "tol = {}", self.tol);
        let _ = writeln!(out, "max_iters = {}", self.max_iters);
        let init = match self.init {
            InitChoice::Connectivity => "connectivity",
            InitChoice::Weighted => "weighted",
            InitChoice::Both => "both",
        };
        let _ = writeln!(out, "init = {init}");
        let _ = writeln!(out, "keep_candidates = {}", self.keep_candidates);
        let order = match self.coloring_order {
            ColoringOrder::AuxDegreeDesc => "degree",
            ColoringOrder::Index => "index",
        };
        let _ = writeln!(out, "coloring_order = {order}");
        let _ = writeln!(out, "\n[task]");
        let kind = match self.task_kind {
            TaskKind::LeastSquares => "least_squares",
            TaskKind::Logistic => "logistic",
        };
        let _ = writeln!(out, "kind = {kind}");
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "samples_per_node = {}", self.samples_per_node);
        let _ = writeln!(out, "heterogeneity = {}", self.heterogeneity);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "iters = {}", self.iters);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(out, "lr_decay_every = {}", self.lr_decay_every);
        if !self.lr_milestones.is_empty() {
            let list: Vec<String> = self.lr_milestones.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(out, "lr_milestones = {}", list.join(","));
        }
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "threads = {}", self.threads);
        let _ = writeln!(out, "\n[output]");
        let _ = writeln!(out, "dir = {}", self.out_dir);
        out
    }
}

/// Parse a configuration document. Defaults fill everything except the
/// topology kind; referenced files must exist.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    let mut saw_kind = false;
    let mut topo_kind: Option<&str> = None;
    let mut topo_n: Option<usize> = None;
    let mut topo_param: Option<f64> = None;
    let mut topo_file: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| line_err(line, "unterminated section header"))?;
            match name {
                "topology" | "schedule" | "optimizer" | "task" | "train" | "output" => {
                    section = name.to_string();
                }
                other => return Err(line_err(line, format!("unknown section '[{other}]'"))),
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| line_err(line, "expected 'key = value'"))?;
        let key = key.trim();
        let value = value.trim();
        let parse_usize = |v: &str| -> Result<usize, ConfigError> {
            v.parse().map_err(|_| {
                line_err(
                    line,
                    format!("'{key}' expects a non-negative integer, got '{v}'"),
                )
            })
        };
        let parse_f64 = |v: &str| -> Result<f64, ConfigError> {
            v.parse()
                .map_err(|_| line_err(line, format!("'{key}' expects a number, got '{v}'")))
        };
        let parse_u64 = |v: &str| -> Result<u64, ConfigError> {
            v.parse().map_err(|_| {
                line_err(
                    line,
                    format!("'{key}' expects a non-negative integer, got '{v}'"),
                )
            })
        };
        match (section.as_str(), key) {
            ("topology", "kind") => {
                saw_kind = true;
                match value {
                    "geometric" | "erdos_renyi" | "two_stars" | "forest" | "file" => {
                        topo_kind = Some(match value {
                            "geometric" => "geometric",
                            "erdos_renyi" => "erdos_renyi",
                            "two_stars" => "two_stars",
                            "forest" => "forest",
                            _ => "file",
                        });
                    }
                    other => {
                        return Err(line_err(line, format!("unknown topology kind '{other}'")))
                    }
                }
            }
            ("topology", "n") => topo_n = Some(parse_usize(value)?),
            ("topology", "param") => topo_param = Some(parse_f64(value)?),
            ("topology", "file") => topo_file = Some(value.to_string()),
            ("schedule", "scheduler") => {
                cfg.scheduler = match value {
                    "bass_optimized" => SchedulerKind::BassOptimized,
                    "bass_heuristic" => SchedulerKind::BassHeuristic,
                    "matching" => SchedulerKind::Matching,
                    "full_comm" => SchedulerKind::FullComm,
                    other => return Err(line_err(line, format!("unknown scheduler '{other}'"))),
                }
            }
            ("schedule", "budget") => {
                cfg.budget = if let Some(pct) = value.strip_suffix('%') {
                    let p = pct.trim().parse().map_err(|_| {
                        line_err(
                            line,
                            format!("'budget' expects a percentage, got '{value}'"),
                        )
                    })?;
                    if !(0.0..=100.0).contains(&p) || p <= 0.0 {
                        return Err(line_err(
                            line,
                            format!("budget percentage {p} outside (0, 100]"),
                        ));
                    }
                    BudgetSpec::Percent(p)
                } else {
                    BudgetSpec::Slots(parse_usize(value)?)
                };
            }
            ("schedule", "fail_prob") => {
                let p = parse_f64(value)?;
                if !(0.0..1.0).contains(&p) {
                    return Err(line_err(line, format!("fail_prob {p} outside [0, 1)")));
                }
                cfg.fail_prob = p;
            }
            ("optimizer", "outer_iters") => cfg.outer_iters = parse_usize(value)?,
            ("optimizer", "tol") => cfg.tol = parse_f64(value)?,
            ("optimizer", "max_iters") => cfg.max_iters = parse_usize(value)?,
            ("optimizer", "init") => {
                cfg.init = match value {
                    "connectivity" => InitChoice::Connectivity,
                    "weighted" => InitChoice::Weighted,
                    "both" => InitChoice::Both,
                    other => return Err(line_err(line, format!("unknown init '{other}'"))),
                }
            }
            ("optimizer", "keep_candidates") => cfg.keep_candidates = parse_usize(value)?,
            ("optimizer", "coloring_order") => {
                cfg.coloring_order = match value {
                    "degree" => ColoringOrder::AuxDegreeDesc,
                    "index" => ColoringOrder::Index,
                    other => {
                        return Err(line_err(line, format!("unknown coloring order '{other}'")))
                    }
                }
            }
            ("task", "kind") => {
                cfg.task_kind = match value {
                    "least_squares" => TaskKind::LeastSquares,
                    "logistic" => TaskKind::Logistic,
                    other => return Err(line_err(line, format!("unknown task kind '{other}'"))),
                }
            }
            ("task", "dim") => cfg.dim = parse_usize(value)?,
            ("task", "samples_per_node") => cfg.samples_per_node = parse_usize(value)?,
            ("task", "heterogeneity") => cfg.heterogeneity = parse_f64(value)?,
            ("task", "batch_size") => cfg.batch_size = parse_usize(value)?,
            ("train", "iters") => cfg.iters = parse_usize(value)?,
            ("train", "lr") => cfg.lr = parse_f64(value)?,
            ("train", "lr_decay") => cfg.lr_decay = parse_f64(value)?,
            ("train", "lr_decay_every") => cfg.lr_decay_every = parse_usize(value)?,
            ("train", "lr_milestones") => {
                cfg.lr_milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim().parse().map_err(|_| {
                            line_err(line, format!("'lr_milestones' expects integers, got '{s}'"))
                        })
                    })
                    .collect::<Result<Vec<usize>, _>>()?;
            }
            ("train", "seed") => cfg.seed = parse_u64(value)?,
            ("train", "threads") => cfg.threads = parse_usize(value)?,
            ("output", "dir") => cfg.out_dir = value.to_string(),
            ("", k) => return Err(line_err(line, format!("key '{k}' before any section"))),
            (s, k) => {
                return Err(line_err(
                    line,
                    format!("unknown key '{k}' in section '[{s}]'"),
                ))
            }
        }
    }

    if !saw_kind {
        return Err(ConfigError::Missing("topology.kind"));
    }
    cfg.topology = match topo_kind.unwrap() {
        "file" => {
            let path = topo_file.ok_or(ConfigError::Missing("topology.file"))?;
            if !Path::new(&path).exists() {
                return Err(ConfigError::Invalid(format!(
                    "topology file '{path}' does not exist"
                )));
            }
            TopologySpec::File(path)
        }
        kind => {
            let n = topo_n.ok_or(ConfigError::Missing("topology.n"))?;
            let kind = match kind {
                "geometric" => TopologyKind::Geometric,
                "erdos_renyi" => TopologyKind::ErdosRenyi,
                "two_stars" => TopologyKind::TwoStars,
                _ => TopologyKind::Forest,
            };
            TopologySpec::Generated {
                kind,
                n,
                param: topo_param.unwrap_or(0.0),
            }
        }
    };

    if cfg.iters == 0 {
        return Err(ConfigError::Invalid("train.iters must be positive".into()));
    }
    if cfg.dim == 0 || cfg.samples_per_node == 0 {
        return Err(ConfigError::Invalid(
            "task.dim and task.samples_per_node must be positive".into(),
        ));
    }
    if cfg.lr <= 0.0 {
        return Err(ConfigError::Invalid("train.lr must be positive".into()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("[topology]\nkind = two_stars\nn = 9\n").unwrap();
        assert_eq!(cfg.scheduler, SchedulerKind::BassOptimized);
        assert_eq!(cfg.budget, BudgetSpec::Percent(50.0));
        assert_eq!(cfg.iters, 500);
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn budget_percentage_resolution() {
        assert_eq!(BudgetSpec::Percent(50.0).resolve(8).unwrap(), 4);
        assert_eq!(BudgetSpec::Percent(50.0).resolve(5).unwrap(), 3);
        assert_eq!(BudgetSpec::Percent(1.0).resolve(8).unwrap(), 1);
        assert_eq!(BudgetSpec::Slots(3).resolve(5).unwrap(), 3);
        assert!(BudgetSpec::Slots(9).resolve(5).is_err());
    }

    #[test]
    fn negative_iters_is_a_line_error() {
        let err =
            parse_config("[topology]\nkind = two_stars\nn = 9\n[train]\niters = -5\n").unwrap_err();
        match err {
            ConfigError::Line { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_section_rejected() {
        let err = parse_config("[topology]\nkind = two_stars\nn = 9\nbogus = 1\n").unwrap_err();
        match err {
            ConfigError::Line { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_config("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn missing_required_fields() {
        assert!(matches!(
            parse_config("[train]\niters = 10\n"),
            Err(ConfigError::Missing("topology.kind"))
        ));
        assert!(matches!(
            parse_config("[topology]\nkind = geometric\n"),
            Err(ConfigError::Missing("topology.n"))
        ));
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut cfg = ExperimentConfig {
            topology: TopologySpec::Generated {
                kind: TopologyKind::Geometric,
                n: 16,
                param: 0.4,
            },
            scheduler: SchedulerKind::Matching,
            budget: BudgetSpec::Slots(4),
            fail_prob: 0.125,
            heterogeneity: 0.7,
            lr: 0.05,
            lr_milestones: vec![100, 150, 200],
            seed: 99,
            ..ExperimentConfig::default()
        };
        assert_eq!(parse_config(&cfg.write()).unwrap(), cfg);
        cfg.budget = BudgetSpec::Percent(37.5);
        cfg.lr_milestones.clear();
        assert_eq!(parse_config(&cfg.write()).unwrap(), cfg);
    }

    #[test]
    fn missing_topology_file_rejected() {
        let err = parse_config("[topology]\nkind = file\nfile = /nonexistent/g.txt\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
