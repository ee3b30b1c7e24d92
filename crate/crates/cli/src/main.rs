use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fusekit::harness::{
    compare, emit_attention_trace, evaluate_saved, is_divergence, load_model, run_experiment, table_csv, trace_csv,
    ExperimentConfig, MetricsReport,
};
use fusekit::synth::{gen_scenario, write_dataset, ModalSequence, ScenarioConfig};
use fusekit::{Error, Result};

/// Overrides the output directory of every command that writes files.
const OUT_ENV: &str = "FUSEKIT_OUT";

#[derive(Parser)]
#[command(name = "fusekit", version, about = "Multimodal fusion experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over FUSEKIT_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario's train/val/test datasets for each seed.
    Synth(Common),
    /// Train and evaluate the configured model for each seed.
    Train(Common),
    /// Evaluate a saved model on the data the config generates.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-frame attention trace of a saved fusion model.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
    /// Train several configs and print one table row per config.
    Compare {
        /// Config files, one table row each.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    Ok(config)
}

fn out_override(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
}

fn configured(common: &Common) -> Result<ExperimentConfig> {
    let mut config = load_config(common.config.as_deref(), common.seed)?;
    if let Some(out) = out_override(common.out.as_deref()) {
        config.out = Some(out);
    }
    config.validate()?;
    Ok(config)
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Contract(e.to_string()))
}

fn report_output(reports: &[MetricsReport], format: Format) -> Result<String> {
    match format {
        Format::Json if reports.len() == 1 => json(&reports[0]),
        Format::Json => json(&compare(reports)),
        Format::Csv => table_csv(&compare(reports)),
    }
}

fn synth(common: &Common) -> Result<String> {
    let config = configured(common)?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let scenario = ScenarioConfig {
            seed,
            ..config.scenario.clone()
        };
        let data = gen_scenario(&scenario)?;
        let dir = config.out_dir().join("data").join(format!("seed-{seed}"));
        for (split, seqs) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            write_dataset(&dir.join(format!("{split}.fkd")), seqs, seed)?;
            let frames: usize = seqs.iter().map(ModalSequence::frames).sum();
            let on: usize = seqs.iter().flat_map(|s| &s.y).map(|&y| usize::from(y)).sum();
            rows.push(serde_json::json!({
                "seed": seed,
                "split": split,
                "sequences": seqs.len(),
                "frames": frames,
                "positive_rate": if frames == 0 { 0.0 } else { on as f64 / frames as f64 },
            }));
        }
    }
    match common.format {
        Format::Json => json(&rows),
        Format::Csv => {
            let mut s = "seed,split,sequences,frames,positive_rate\n".to_string();
            for r in &rows {
                s += &format!(
                    "{},{},{},{},{}\n",
                    r["seed"], r["split"].as_str().unwrap_or_default(), r["sequences"], r["frames"], r["positive_rate"]
                );
            }
            Ok(s)
        }
    }
}

/// Prints the output; a diverged run maps to exit code 2.
fn execute(command: Command) -> Result<(String, bool)> {
    match command {
        Command::Synth(common) => Ok((synth(&common)?, false)),
        Command::Train(common) => {
            let report = run_experiment(&configured(&common)?)?;
            Ok((report_output(std::slice::from_ref(&report), common.format)?, report.failed()))
        }
        Command::Eval { common, model } => {
            let config = configured(&common)?;
            let model = load_model(&model)?;
            let runs = config
                .seeds
                .iter()
                .map(|&s| evaluate_saved(&model, &config, s))
                .collect::<Result<Vec<_>>>()?;
            let out = match common.format {
                Format::Json => json(&runs)?,
                Format::Csv => {
                    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                    let mut s = "seed,train,val,test\n".to_string();
                    for r in &runs {
                        s += &format!(
                            "{},{},{},{}\n",
                            r.seed,
                            cell(r.train_accuracy),
                            cell(r.val_accuracy),
                            cell(r.test_accuracy)
                        );
                    }
                    s
                }
            };
            Ok((out, false))
        }
        Command::Trace {
            common,
            model,
            split,
            sequence,
        } => {
            let config = configured(&common)?;
            let seed = config.seeds[0];
            let data = gen_scenario(&ScenarioConfig {
                seed,
                ..config.scenario.clone()
            })?;
            let seqs = match split {
                Split::Train => &data.train,
                Split::Val => &data.val,
                Split::Test => &data.test,
            };
            let seq = seqs
                .get(sequence)
                .ok_or_else(|| Error::Validation(format!("sequence {sequence} not in split of {}", seqs.len())))?;
            let rows = emit_attention_trace(&load_model(&model)?, seq)?;
            let out = match common.format {
                Format::Json => json(&rows)?,
                Format::Csv => trace_csv(&rows)?,
            };
            Ok((out, false))
        }
        Command::Compare {
            configs,
            seed,
            out,
            format,
        } => {
            let base = out_override(out.as_deref());
            let mut loaded = Vec::with_capacity(configs.len());
            for path in &configs {
                let mut config = load_config(Some(path), seed)?;
                if let Some(b) = &base {
                    config.out = Some(b.join(&config.name));
                }
                config.validate()?;
                loaded.push(config);
            }
            let reports = loaded.iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
            let failed = reports.iter().any(MetricsReport::failed);
            let out = match format {
                Format::Json => json(&compare(&reports))?,
                Format::Csv => table_csv(&compare(&reports))?,
            };
            Ok((out, failed))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok((out, failed)) => {
            print!("{out}");
            if failed {
                eprintln!("error: at least one run diverged");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_divergence(&e) { 2 } else { 1 })
        }
    }
}
