//! Run configuration: a JSON file, flag overrides on top, then defaults.
//! The fully resolved form is embedded in every artifact and can be fed
//! back through `--config` to replay the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collegial::dataio::{self, Dataset};
use collegial::search::EfficiencyMetric;
use collegial::{EntrySelector, Topology};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySource {
    Path(PathBuf),
    Inline(Topology),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    Value(f64),
    Fit,
}

impl Serialize for AlphaSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AlphaSpec::Value(v) => s.serialize_f64(*v),
            AlphaSpec::Fit => s.serialize_str("fit"),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AlphaSpec::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for AlphaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "fit" {
            return Ok(AlphaSpec::Fit);
        }
        s.parse::<f64>()
            .map(AlphaSpec::Value)
            .map_err(|_| format!("alpha must be a number or \"fit\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Primal,
    Dual,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        count: usize,
        dim: usize,
        seed: u64,
    },
    Circle {
        count: usize,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        classes: [u8; 2],
        limit: usize,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            DatasetSpec::Synthetic { count, dim, seed } => dataio::synthetic_binary(*count, *dim, *seed)?,
            DatasetSpec::Circle { count } => dataio::circle_dataset(&dataio::circle_gammas(*count))?,
            DatasetSpec::Mnist {
                images,
                labels,
                classes,
                limit,
            } => dataio::load_mnist_idx(images, labels, (classes[0], classes[1]), *limit)?,
        })
    }

    fn absolutize(&mut self, base: &Path) {
        if let DatasetSpec::Mnist { images, labels, .. } = self {
            *images = base.join(&*images);
            *labels = base.join(&*labels);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    /// `(m, n)` pairs.
    pub runs: Vec<[usize; 2]>,
    pub seeds: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub tracked_entries: Vec<(usize, usize)>,
    pub record_every: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            runs: vec![[1, 16], [4, 16], [16, 16], [4, 64], [16, 64], [64, 64]],
            seeds: 12,
            learning_rate: 0.001,
            steps: 20,
            tracked_entries: vec![(0, 1)],
            record_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmkSection {
    pub m_values: Vec<usize>,
    pub seeds_per_point: usize,
    /// Widths for the mean-independence check; skipped when empty.
    #[serde(default)]
    pub widths: Vec<usize>,
}

impl Default for NmkSection {
    fn default() -> Self {
        Self {
            m_values: vec![1, 4, 16, 64],
            seeds_per_point: 500,
            widths: Vec::new(),
        }
    }
}

/// On-disk form; every field may be omitted and filled by flags or
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<EfficiencyMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    /// Inclusive `[min, max]` search widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_overhead: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<EntrySelector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplicity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmk: Option<NmkSection>,
}

/// Reads a run config, or the `config` object embedded in an artifact.
/// Relative paths inside resolve against the file's directory.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(TopologySource::Path(p)) = &mut cfg.topology {
        *p = base.join(&*p);
    }
    if let Some(d) = &mut cfg.dataset {
        d.absolutize(base);
    }
    Ok(cfg)
}

/// Invocation problem rather than a module failure (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn resolve_topology(src: Option<&TopologySource>) -> Result<Topology> {
    match src {
        None => Err(usage(
            "no topology given; pass --topology or set \"topology\" in the config",
        )),
        Some(TopologySource::Inline(t)) => Ok(t.clone()),
        Some(TopologySource::Path(p)) => Ok(dataio::read_json(p)?),
    }
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| usage("a seed is required; pass --seed or set \"seed\" in the config"))
    }

    /// Fills every default the subcommand reads and inlines the topology.
    pub fn resolve(mut self, command: &str) -> Result<Self> {
        self.seed()?;
        self.command = Some(command.to_string());
        let topology = resolve_topology(self.topology.as_ref())?;
        self.topology = Some(TopologySource::Inline(topology.clone()));
        let width = topology.search_width();
        match command {
            "fit-alpha" | "search" => {
                if command == "search" {
                    if self.alpha.is_none() {
                        bail!(usage("search needs --alpha <value|fit>"));
                    }
                    self.metric.get_or_insert(EfficiencyMetric::Params);
                    self.objective.get_or_insert(Objective::Both);
                    let w = width.ok_or_else(|| usage("topology has no searchable layer"))?;
                    self.grid.get_or_insert([1, w]);
                }
                if command == "fit-alpha" || self.alpha == Some(AlphaSpec::Fit) {
                    let w = width.ok_or_else(|| usage("topology has no searchable layer"))?;
                    self.trials.get_or_insert(2000);
                    self.ladder.get_or_insert_with(|| default_ladder(w));
                    self.entry.get_or_insert(EntrySelector::Diagonal(0));
                }
            }
            "verify-dynamics" => {
                self.dynamics.get_or_insert_with(DynamicsSection::default);
                let seed = self.seed()?;
                self.dataset.get_or_insert(DatasetSpec::Synthetic {
                    count: 128,
                    dim: topology.input_width(),
                    seed,
                });
            }
            "nmk" => {
                self.nmk.get_or_insert_with(NmkSection::default);
                self.dataset.get_or_insert(DatasetSpec::Circle { count: 8 });
                self.entry.get_or_insert(EntrySelector::OffDiagonal(0, 1));
            }
            "export" => {
                self.multiplicity.get_or_insert(1);
                self.dataset.get_or_insert(DatasetSpec::Circle { count: 8 });
            }
            other => bail!(usage(format!("unknown command {other}"))),
        }
        Ok(self)
    }

    pub fn topology(&self) -> &Topology {
        match &self.topology {
            Some(TopologySource::Inline(t)) => t,
            _ => panic!("resolve() inlines the topology"),
        }
    }
}

/// Powers of two from 4 up to twice the baseline width.
pub fn default_ladder(width: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = 4;
    while n <= 2 * width.max(2) {
        out.push(n);
        n *= 2;
    }
    out
}
