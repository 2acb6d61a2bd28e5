//! `tune run <recipe> --config <yaml> [key=value ...]` and `tune gen-corpus`.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use minitune_core::data::{synthetic_corpus, write_jsonl};

use crate::config::load_config;
use crate::grpo::GrpoRecipe;
use crate::registry::ComponentRegistry;
use crate::sft::SftRecipe;
use crate::RecipeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RecipeName {
    SftFull,
    SftLora,
    AsyncGrpo,
}

#[derive(Debug, Parser)]
#[command(name = "tune", about = "Config-driven fine-tuning recipes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a recipe from a YAML config; trailing key=value pairs override it.
    Run {
        #[arg(value_enum)]
        recipe: RecipeName,
        #[arg(long)]
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Write a synthetic instruction corpus as JSONL.
    GenCorpus {
        #[arg(long, default_value_t = 256)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_recipe(recipe: RecipeName, config: &PathBuf, overrides: &[String]) -> Result<String, RecipeError> {
    let text = std::fs::read_to_string(config).map_err(|e| RecipeError::io(config, e))?;
    let cfg = load_config(&text, overrides)?;
    let registry = ComponentRegistry::builtin();
    match recipe {
        RecipeName::SftFull | RecipeName::SftLora => {
            let sft = SftRecipe::setup(&cfg, &registry)?;
            let lora = sft.model_component().lora.is_some();
            match (recipe, lora) {
                (RecipeName::SftFull, true) => {
                    return Err(RecipeError::Incompatible(
                        "sft_full needs a dense model, the config builds a LoRA one".into(),
                    ))
                }
                (RecipeName::SftLora, false) => {
                    return Err(RecipeError::Incompatible(
                        "sft_lora needs a LoRA model, the config builds a dense one".into(),
                    ))
                }
                _ => {}
            }
            let out_dir = sft.output_dir().map(PathBuf::from);
            let mut report = sft.run()?;
            report.recipe = if lora { "sft_lora" } else { "sft_full" }.into();
            if let Some(dir) = out_dir {
                report.save(&dir)?;
            }
            Ok(report.summary_text())
        }
        RecipeName::AsyncGrpo => {
            let grpo = GrpoRecipe::setup(&cfg, &registry)?;
            let out = grpo.run()?;
            let report = out.report();
            let mut text = format!(
                "recipe: async_grpo\nsteps: {}\nconsumed: {} dropped_stale: {} evicted: {}\n",
                out.steps.len(),
                report.consumed,
                report.dropped_stale,
                report.evicted
            );
            if let Some(last) = out.steps.last() {
                text += &format!("final reward mean: {:.4}\n", last.reward_mean);
            }
            Ok(text)
        }
    }
}

/// Parses `argv` (program name first) and runs. Returns the exit code:
/// 0 on success, 2 on usage errors, 1 when the recipe fails.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { recipe, config, overrides } => run_recipe(recipe, &config, &overrides),
        Command::GenCorpus { num_samples, seed, out } => write_jsonl(&out, &synthetic_corpus(num_samples, seed))
            .map(|()| format!("wrote {num_samples} samples to {}\n", out.display()))
            .map_err(RecipeError::from),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
