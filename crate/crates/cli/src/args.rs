use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tidegraph::config::ExperimentConfig;
use tidegraph::encoders::EncoderKind;
use tidegraph::events::{NodeKey, VarType};
use tidegraph::experiment::SplitName;
use tidegraph::graph::TopologyMode;

#[derive(Debug, Parser)]
#[command(name = "tidegraph", version, about = "Graph forecasting experiments on estuary sensor networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic estuary dataset.
    Generate(GenerateArgs),
    /// Train one run per input set and write reports.
    Train(TrainArgs),
    /// Score a saved checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Compare the three topology modes with otherwise identical settings.
    AblateTopology(AblateArgs),
    /// Score the persistence and harmonic baselines.
    Baselines(ExperimentArgs),
    /// Merge run reports and export plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory for events.csv, events_truth.csv, world.json and registry.json.
    #[arg(long)]
    pub out: PathBuf,
    /// World description (JSON); defaults to the built-in estuary.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings shared by every command that reads a dataset. Flags override
/// the config file, which overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Events CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Registry JSON; defaults to registry.json next to the events.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Target types, comma separated.
    #[arg(long, value_parser = parse_types)]
    pub targets: Option<TypeList>,
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderKind>,
    /// full, same_type or disconnected.
    #[arg(long, value_parser = parse_topology)]
    pub topology: Option<TopologyMode>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub snapshots: Option<usize>,
    #[arg(long)]
    pub past_hours: Option<f64>,
    #[arg(long)]
    pub future_hours: Option<f64>,
    #[arg(long)]
    pub embed_size: Option<usize>,
    #[arg(long)]
    pub gnn_blocks: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output root directory.
    #[arg(long, env = "TIDEGRAPH_OUTPUT_ROOT")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Input types, comma separated. Repeat to train a scenario grid.
    #[arg(long, value_parser = parse_types)]
    pub inputs: Vec<TypeList>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Score only target nodes at these stations (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub locations: Option<Vec<String>>,
    /// Write the evaluation (report and forecasts) here instead of printing the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Input types, comma separated.
    #[arg(long, value_parser = parse_types)]
    pub inputs: Option<TypeList>,
    /// Also train with the GNN bypassed and compare it with the disconnected run.
    #[arg(long)]
    pub verify_bypass: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding report-*.json files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Export the forecast of this node (`type@location`) from the first run.
    #[arg(long, value_parser = parse_node)]
    pub overlay_node: Option<NodeKey>,
    #[arg(long, default_value_t = 0)]
    pub overlay_seed: u64,
    /// Reference time (unix seconds) of the exported forecast; defaults to the first one.
    #[arg(long)]
    pub overlay_time: Option<i64>,
}

/// Variable types given as `a,b` or `a+b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeList(pub Vec<VarType>);

fn parse_types(s: &str) -> Result<TypeList, String> {
    let types: Vec<VarType> = s
        .split([',', '+'])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(VarType::new)
        .collect();
    if types.is_empty() {
        return Err("expected at least one variable type".into());
    }
    Ok(TypeList(types))
}

fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    match s {
        "lstm" => Ok(EncoderKind::Lstm),
        "transformer" => Ok(EncoderKind::Transformer),
        _ => Err(format!("unknown encoder `{s}` (lstm, transformer)")),
    }
}

fn parse_topology(s: &str) -> Result<TopologyMode, String> {
    match s {
        "full" => Ok(TopologyMode::FullyConnected),
        "same_type" => Ok(TopologyMode::SameTypeOnly),
        "disconnected" => Ok(TopologyMode::Disconnected),
        _ => Err(format!("unknown topology `{s}` (full, same_type, disconnected)")),
    }
}

fn parse_node(s: &str) -> Result<NodeKey, String> {
    match s.split_once('@') {
        Some((t, loc)) if !t.is_empty() && !loc.is_empty() => Ok(NodeKey::new(VarType::new(t), loc)),
        _ => Err(format!("expected `type@location`, got `{s}`")),
    }
}

fn hours(h: f64) -> i64 {
    (h * 3600.0).round() as i64
}

impl ExperimentArgs {
    /// Loads the config file (or defaults) and applies the flags.
    pub fn resolve(&self) -> tidegraph::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.data {
            c.data.events = d.clone();
        }
        if let Some(r) = &self.registry {
            c.data.registry = Some(r.clone());
        }
        if let Some(t) = &self.targets {
            c.targets = t.0.iter().cloned().collect();
        }
        if let Some(e) = self.encoder {
            c.model.encoder.kind = e;
        }
        if let Some(t) = self.topology {
            c.topology = t;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(n) = self.snapshots {
            c.snapshots = n;
        }
        if let Some(h) = self.past_hours {
            c.window.past_len = hours(h);
        }
        if let Some(h) = self.future_hours {
            c.window.future_len = hours(h);
        }
        if let Some(n) = self.embed_size {
            c.model.encoder.embed_size = n;
        }
        if let Some(n) = self.gnn_blocks {
            c.model.gnn_blocks = n;
        }
        if let Some(n) = self.epochs {
            c.train.max_epochs = n;
        }
        if let Some(n) = self.patience {
            c.train.patience = n;
        }
        if let Some(n) = self.batch_size {
            c.train.batch_size = n;
        }
        if let Some(lr) = self.lr {
            c.train.adam.lr = lr;
        }
        if let Some(o) = &self.output {
            c.output = o.clone();
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"snapshots": 40, "seeds": [5], "train": {"max_epochs": 7}}"#).unwrap();
        let args = ExperimentArgs {
            config: Some(path),
            seeds: Some(vec![1, 2]),
            past_hours: Some(1.5),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.snapshots, 40);
        assert_eq!(c.train.max_epochs, 7);
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.window.past_len, 5400);
        assert_eq!(c.window.future_len, ExperimentConfig::default().window.future_len);
    }

    #[test]
    fn parses_type_lists_and_nodes() {
        assert_eq!(parse_types("current+ssh").unwrap().0, vec![VarType::current(), VarType::ssh()]);
        assert_eq!(parse_types("Wind, ssh").unwrap().0, vec![VarType::wind(), VarType::ssh()]);
        assert!(parse_types(",").is_err());
        assert_eq!(parse_node("ssh@cpsp").unwrap(), NodeKey::new(VarType::ssh(), "cpsp"));
        assert!(parse_node("cpsp").is_err());
    }
}
