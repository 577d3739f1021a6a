mod args;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use tidegraph::config::ExperimentConfig;
use tidegraph::experiment::{self, OverlayRequest};
use tidegraph::model::Model;
use tidegraph::synth::{generate, write_dataset, WorldConfig};

use args::{AblateArgs, Cli, Command, EvaluateArgs, ExperimentArgs, GenerateArgs, ReportArgs, TrainArgs};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<tidegraph::Error>(),
            Some(tidegraph::Error::Config(_) | tidegraph::Error::UnknownType(_))
        )
    });
    if config {
        2
    } else {
        1
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AblateTopology(a) => cmd_ablate(a),
        Command::Baselines(a) => cmd_baselines(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut world = match &a.world {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| tidegraph::Error::Config(format!("invalid world file {}: {e}", p.display())))?
        }
        None => WorldConfig::default(),
    };
    if let Some(d) = a.days {
        world.days = d;
    }
    if let Some(s) = a.seed {
        world.seed = s;
    }
    let out = generate(&world)?;
    let written = write_dataset(&a.out, &world, &out)?;
    println!(
        "wrote {} observed rows to {} and {} truth rows to {}",
        written.event_rows,
        written.events.display(),
        written.truth_rows,
        written.truth.display()
    );
    Ok(())
}

fn validated(common: &ExperimentArgs, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut c = common.resolve()?;
    edit(&mut c);
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let base = validated(&a.common, |_| {})?;
    let grid: Vec<ExperimentConfig> = if a.inputs.is_empty() {
        vec![base]
    } else {
        a.inputs
            .iter()
            .map(|inputs| ExperimentConfig {
                inputs: inputs.0.iter().cloned().collect(),
                ..base.clone()
            })
            .collect()
    };
    for c in &grid {
        c.validate()?;
    }
    for c in grid {
        let report = experiment::run_train(&c)?;
        println!("{}: {}", c.input_set_name(), summary(&report.mean));
        if !report.failures.is_empty() {
            log::warn!("{} of {} seeds failed", report.failures.len(), c.seeds.len());
        }
        println!("reports in {}", experiment::train_dir(&c).display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let c = validated(&a.common, |_| {})?;
    // the checkpoint decides which types are read
    let model = Model::load(&a.checkpoint)?;
    let store = experiment::load_store(&ExperimentConfig {
        inputs: model.spec.inputs.clone(),
        targets: model.spec.targets.clone(),
        ..c.clone()
    })?;
    let eval = experiment::run_evaluate(&c, store, &a.checkpoint, a.split, a.locations.as_deref())?;
    match &a.out {
        Some(p) => {
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "report": eval.report,
                "forecasts": eval.forecasts,
            }))?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("{}", summary(&eval.report.flatten()));
        }
        None => println!("{}", serde_json::to_string_pretty(&eval.report)?),
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let c = validated(&a.common, |c| {
        if let Some(i) = &a.inputs {
            c.inputs = i.0.iter().cloned().collect();
        }
    })?;
    let store = experiment::load_store(&c)?;
    let table = experiment::run_ablation(&c, store, a.verify_bypass)?;
    print!("{}", table.to_csv());
    if let Some(b) = &table.bypass {
        println!("bypass check: {} metrics compared, max |diff| {:e}", b.compared, b.max_abs_diff);
    }
    println!("tables in {}", experiment::ablation_dir(&c).display());
    Ok(())
}

fn cmd_baselines(a: ExperimentArgs) -> Result<()> {
    let c = validated(&a, |_| {})?;
    let store = experiment::load_store(&c)?;
    let report = experiment::run_baselines(&c, store)?;
    print!("{}", report.to_csv());
    println!("reports in {}", experiment::baselines_dir(&c).display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let overlay = a.overlay_node.map(|node| OverlayRequest {
        seed: a.overlay_seed,
        node,
        reference_time: a.overlay_time,
    });
    let rows = experiment::run_report(&a.runs, &a.out, overlay.as_ref())?;
    for r in &rows {
        println!("{} ({} seeds): {}", r.run, r.seeds, summary(&r.mean));
    }
    println!("merged report in {}", display(&a.out));
    Ok(())
}

fn summary(metrics: &std::collections::BTreeMap<String, f64>) -> String {
    let headline: Vec<String> = metrics
        .iter()
        .filter(|(k, _)| k.ends_with("/headline/ioa"))
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    if headline.is_empty() {
        format!("{} metrics", metrics.len())
    } else {
        headline.join(" ")
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
