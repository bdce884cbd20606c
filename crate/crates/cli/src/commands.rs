//! Command-line surface and subcommand handlers.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fusdom_core::datagen::Split;
use fusdom_core::downstream::{evaluate, FinetuneMode, Vocab};
use fusdom_core::trainer::{run_cp_stage, Strategy};

use crate::checkpoint::{load_checkpoint, load_finetuned, save_checkpoint, save_finetuned};
use crate::config::{parse_config, ExperimentConfig, Recipe};
use crate::error::{CliError, Result};
use crate::experiment::{
    finetune, finetune_seed, generate_data, load_labeled, load_source, load_unlabeled,
    pretrain_seed, run_experiment, stage_seed, Layout,
};
use crate::report::{render_summary, summarize, write_summary};

#[derive(Debug, Parser)]
#[command(
    name = "fusdom",
    version,
    about = "FusDom continued pre-training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; overrides `out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: fusdom_core::Error| e.to_string())
}

fn parse_recipe(s: &str) -> std::result::Result<Recipe, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<FinetuneMode, String> {
    s.parse().map_err(|e: fusdom_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate every dataset split the configured recipes need.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the initial model on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run one continued pre-training stage per arm from a checkpoint.
    Cp {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of nocp, vanilla, fusdom.
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
        arms: Option<Vec<Strategy>>,
        /// CP domain; defaults to `data.target`.
        #[arg(long)]
        domain: Option<String>,
        /// Starting checkpoint; defaults to the seed's pre-trained model.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Fine-tune a backbone checkpoint with a CTC head.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "e2e", value_parser = parse_mode)]
        mode: FinetuneMode,
    },
    /// Evaluate a fine-tuned model on a domain's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Run full recipes and write the report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
        arms: Option<Vec<Strategy>>,
        #[arg(long, value_parser = parse_recipe)]
        recipe: Option<Recipe>,
    },
    /// Aggregate one or more report.json files.
    Summarize {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for summary.csv, summary_pairs.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(
    common: &Common,
    arms: Option<&[Strategy]>,
    recipe: Option<Recipe>,
) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if let Some(arms) = arms {
        config.arms = arms.to_vec();
        config.arms.sort();
        config.arms.dedup();
    }
    if let Some(recipe) = recipe {
        config.recipes = vec![recipe];
    }
    config.validate()?;
    Ok(config)
}

fn ensure_data(config: &ExperimentConfig, layout: &Layout, seed: u64, domain: &str) -> Result<()> {
    if !layout.dataset(seed, domain, Split::Test).exists() {
        generate_data(config, layout, seed)?;
    }
    Ok(())
}

fn known_domain(config: &ExperimentConfig, domain: &str) -> Result<()> {
    if config.domains().iter().any(|d| d == domain) {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "domain `{domain}` is not used by this config (known: {:?})",
            config.domains()
        )))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Executes a parsed command. Returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { common } => {
            let config = resolve_config(&common, None, None)?;
            let layout = Layout::new(&config.out);
            for &seed in &config.seeds {
                for path in generate_data(&config, &layout, seed)? {
                    println!("{}", path.display());
                }
            }
        }
        Command::Pretrain { common } => {
            let config = resolve_config(&common, None, None)?;
            let layout = Layout::new(&config.out);
            for &seed in &config.seeds {
                let source = &config.data.source;
                ensure_data(&config, &layout, seed, source)?;
                let data = load_unlabeled(&layout.dataset(seed, source, Split::Pretrain))?;
                let plan = config.pretrain_plan(pretrain_seed(seed));
                let (snapshot, losses) = fusdom_core::trainer::pretrain_from_scratch(
                    config.backbone,
                    &data,
                    &plan,
                    &config.pretext_options(),
                )?;
                let path = layout.source_checkpoint(seed);
                save_checkpoint(&snapshot, &path)?;
                println!("{} final_loss={:?}", path.display(), losses.last());
            }
        }
        Command::Cp {
            common,
            arms,
            domain,
            from,
        } => {
            let config = resolve_config(&common, arms.as_deref(), None)?;
            let layout = Layout::new(&config.out);
            let domain = domain.unwrap_or_else(|| config.data.target.clone());
            known_domain(&config, &domain)?;
            for &seed in &config.seeds {
                let prev = match &from {
                    Some(path) => load_checkpoint(path)?,
                    None => load_source(&layout, seed)?,
                };
                ensure_data(&config, &layout, seed, &domain)?;
                let data = load_unlabeled(&layout.dataset(seed, &domain, Split::Pretrain))?;
                let mut order: Vec<String> = prev
                    .provenance
                    .iter()
                    .map(|r| r.domain_id.clone())
                    .collect();
                let position = order.len();
                order.push(domain.clone());
                for &arm in &config.arms {
                    let plan = config.cp_plan(&domain, arm, stage_seed(seed, &domain, position));
                    let out = run_cp_stage(&prev, &data, &plan, &config.pretext_options())?;
                    let path = layout.cp_checkpoint(seed, arm, &order);
                    save_checkpoint(&out.snapshot, &path)?;
                    println!(
                        "{} final_loss={:?}",
                        path.display(),
                        out.epoch_losses.last()
                    );
                }
            }
        }
        Command::Finetune {
            common,
            checkpoint,
            domain,
            mode,
        } => {
            let config = resolve_config(&common, None, None)?;
            known_domain(&config, &domain)?;
            let layout = Layout::new(&config.out);
            let seed = config.seeds[0];
            ensure_data(&config, &layout, seed, &domain)?;
            let vocab = Vocab::synthetic(config.data.shape.vocab_size)?;
            let train = load_labeled(&layout.dataset(seed, &domain, Split::Train), &vocab)?;
            let snapshot = load_checkpoint(&checkpoint)?;
            let model = finetune(
                &snapshot,
                &train,
                &vocab,
                &config,
                finetune_seed(seed, &domain),
                mode,
            )?;
            let path = layout.finetuned(seed, &file_stem(&checkpoint), &domain, mode);
            save_finetuned(&model, &path)?;
            println!("{}", path.display());
        }
        Command::Eval {
            common,
            model,
            domain,
        } => {
            let config = resolve_config(&common, None, None)?;
            known_domain(&config, &domain)?;
            let layout = Layout::new(&config.out);
            let seed = config.seeds[0];
            ensure_data(&config, &layout, seed, &domain)?;
            let model = load_finetuned(&model)?;
            let vocab = Vocab::synthetic(model.vocab_size() - 1)?;
            let test = load_labeled(&layout.dataset(seed, &domain, Split::Test), &vocab)?;
            let result = evaluate(&model, &test)?;
            println!(
                "{}",
                serde_json::to_string(&result).map_err(|e| CliError::Report(e.to_string()))?
            );
        }
        Command::Run {
            common,
            arms,
            recipe,
        } => {
            let config = resolve_config(&common, arms.as_deref(), recipe)?;
            let report = run_experiment(&config)?;
            print!("{}", render_summary(&report.summary));
            println!("report: {}", config.out.join("report.csv").display());
            if report.failures > 0 {
                eprintln!("{} row(s) failed; see the reason column", report.failures);
                return Ok(2);
            }
        }
        Command::Summarize { reports, out } => {
            let doc = summarize(&reports)?;
            if let Some(dir) = out {
                write_summary(&doc, &dir)?;
            }
            print!("{}", render_summary(&doc.summary));
        }
    }
    Ok(0)
}
