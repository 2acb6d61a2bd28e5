// Its own test binary: the seed variable is process-wide.

use minitune_recipes::grpo::GrpoRecipe;
use minitune_recipes::sft::{resolve_seed, SEED_ENV};
use minitune_recipes::{load_config, parse_config, ComponentRegistry, RecipeError, SftRecipe};

const SFT: &str = "
seed: 1
model:
  _component_: minitune.models.decoder
  vocab_size: 259
  num_layers: 1
  num_heads: 2
  num_kv_heads: 1
  embed_dim: 16
  max_seq_len: 32
dataset:
  _component_: minitune.data.random_sequences
  num_samples: 8
  min_len: 4
  max_len: 20
optimizer:
  _component_: minitune.optim.AdamW
loss:
  _component_: minitune.loss.CrossEntropyLoss
max_steps: 2
";

const GRPO: &str = "
seed: 1
task:
  _component_: minitune.grpo.bandit_task
  seed: 1
orchestrator:
  total_steps: 4
";

fn sft_losses(yaml: &str) -> Vec<u32> {
    let cfg = load_config(yaml, &[] as &[&str]).unwrap();
    let r = SftRecipe::setup(&cfg, &ComponentRegistry::builtin()).unwrap();
    r.run().unwrap().steps.iter().map(|s| s.loss.to_bits()).collect()
}

#[test]
fn the_environment_seed_replaces_the_config_seed() {
    std::env::remove_var(SEED_ENV);
    assert_eq!(resolve_seed(&parse_config("seed: 4\n").unwrap()).unwrap(), 4);
    assert_eq!(resolve_seed(&parse_config("seed: ~\n").unwrap()).unwrap(), 0);
    assert_eq!(resolve_seed(&parse_config("{}").unwrap()).unwrap(), 0);
    let seeded_one = sft_losses(SFT);
    let seeded_nine = sft_losses(&SFT.replace("seed: 1", "seed: 9"));

    std::env::set_var(SEED_ENV, "9");
    assert_eq!(resolve_seed(&parse_config("seed: 4\n").unwrap()).unwrap(), 9);
    assert_eq!(sft_losses(SFT), seeded_nine);
    assert_ne!(seeded_one, seeded_nine);
    let registry = ComponentRegistry::builtin();
    let grpo = GrpoRecipe::setup(&parse_config(GRPO).unwrap(), &registry).unwrap();
    assert_eq!(grpo.orchestrator.seed, 9);

    std::env::set_var(SEED_ENV, "minus one");
    assert!(matches!(
        resolve_seed(&parse_config("seed: 4\n").unwrap()),
        Err(RecipeError::Config { key, .. }) if key == SEED_ENV
    ));
    assert!(GrpoRecipe::setup(&parse_config(GRPO).unwrap(), &registry).is_err());
    std::env::remove_var(SEED_ENV);
}
