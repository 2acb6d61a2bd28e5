use std::fs;
use std::path::Path;

use minitune_core::optimizers::MomentRecord;
use minitune_recipes::checkpoint::{
    checkpoint_size, step_dir, validate_manifest, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE,
};
use minitune_recipes::{
    load_checkpoint, load_config, save_checkpoint, Checkpoint, CheckpointManifest, CheckpointMode, ComponentRegistry,
    RecipeError, SftRecipe, TrainingMetadata,
};

const BASE: &str = "
seed: 3
output_dir: /unused
model:
  _component_: minitune.models.decoder
  vocab_size: 259
  num_layers: 2
  num_heads: 4
  num_kv_heads: 2
  embed_dim: 32
  max_seq_len: 64
dataset:
  _component_: minitune.data.random_sequences
  num_samples: 16
  min_len: 8
  max_len: 40
  seed: 1
batch_size: 2
epochs: 1
max_steps: 3
optimizer:
  _component_: minitune.optim.AdamW
  lr: 1e-3
loss:
  _component_: minitune.loss.CrossEntropyLoss
checkpointer:
  _component_: minitune.checkpoint.FullCheckpointer
  output_dir: ${output_dir}/ckpt
";

const LORA: [&str; 6] = [
    "model._component_=minitune.models.lora_decoder",
    "model.lora_rank=4",
    "model.lora_alpha=8.0",
    "model.lora_attn_modules=[q_proj, v_proj]",
    "optimizer._component_=minitune.optim.AdamW8bit",
    "checkpointer._component_=minitune.checkpoint.AdapterCheckpointer",
];

fn setup(dir: &Path, extra: &[&str]) -> Result<SftRecipe, RecipeError> {
    let mut ov = vec![format!("output_dir={}", dir.display())];
    ov.extend(extra.iter().map(|s| s.to_string()));
    SftRecipe::setup(&load_config(BASE, &ov)?, &ComponentRegistry::builtin())
}

/// Trains three steps and returns the recipe plus the final checkpoint dir.
fn trained(dir: &Path, extra: &[&str]) -> (SftRecipe, std::path::PathBuf) {
    let mut r = setup(dir, extra).unwrap();
    while r.train_step().unwrap().is_some() {}
    (r, step_dir(dir.join("ckpt"), 3))
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        fs::copy(from.join(f), to.join(f)).unwrap();
    }
}

fn manifest(dir: &Path) -> CheckpointManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn write_manifest(dir: &Path, m: &CheckpointManifest) {
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(m).unwrap()).unwrap();
}

#[test]
fn full_checkpoint_holds_every_weight_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, dir) = trained(tmp.path(), &[]);
    let ckpt = load_checkpoint(&dir).unwrap();
    assert_eq!(ckpt.mode, CheckpointMode::Full);
    assert_eq!(ckpt.metadata, TrainingMetadata { step: 3, epoch: 0, seed: 3 });
    assert_eq!(ckpt.model, r.model().state());

    let opt = ckpt.optimizer.as_ref().unwrap();
    assert_eq!(opt.states.len(), r.model().parameters().len());
    for rec in opt.states.values() {
        assert_eq!(rec.step, 3);
        assert!(matches!(rec.moments, MomentRecord::F32 { .. }));
    }

    // saving what was loaded reproduces it exactly
    let again = tmp.path().join("again");
    save_checkpoint(&again, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&again).unwrap(), ckpt);
    assert_eq!(fs::read(again.join(BLOB_FILE)).unwrap(), fs::read(dir.join(BLOB_FILE)).unwrap());
}

#[test]
fn restoring_a_full_checkpoint_reproduces_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, dir) = trained(tmp.path(), &[]);
    let fresh = setup(tmp.path(), &["checkpointer=~"]).unwrap();
    assert_ne!(fresh.model().state(), r.model().state());
    load_checkpoint(&dir).unwrap().restore_model(fresh.model()).unwrap();
    assert_eq!(fresh.model().state(), r.model().state());
}

#[test]
fn adapter_checkpoint_is_small_and_carries_int8_state() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, dir) = trained(&tmp.path().join("lora"), &LORA);
    let ckpt = load_checkpoint(&dir).unwrap();
    assert_eq!(ckpt.mode, CheckpointMode::Adapter);
    assert_eq!(ckpt.model.len(), 2 * 2 * 2);
    assert!(ckpt.model.iter().all(|t| t.name.contains(".lora_")));
    let opt = ckpt.optimizer.as_ref().unwrap();
    assert_eq!(opt.states.len(), ckpt.model.len());
    assert!(opt.states.values().all(|s| matches!(s.moments, MomentRecord::Int8 { .. })));

    // adapters land on a fresh base built from the same config
    let fresh = setup(&tmp.path().join("lora"), &LORA).unwrap();
    ckpt.restore_model(fresh.model()).unwrap();
    assert_eq!(fresh.model().state(), r.model().state());

    let (_, full) = trained(&tmp.path().join("full"), &[]);
    let (a, f) = (checkpoint_size(&dir).unwrap(), checkpoint_size(&full).unwrap());
    assert!(a * 10 < f, "adapter {a} bytes vs full {f} bytes");
}

#[test]
fn adapter_mode_refuses_base_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, _) = trained(tmp.path(), &[]);
    let mut ckpt = Checkpoint::capture(CheckpointMode::Full, r.model(), None, TrainingMetadata::default());
    ckpt.mode = CheckpointMode::Adapter;
    assert!(matches!(save_checkpoint(tmp.path().join("x"), &ckpt), Err(RecipeError::Checkpoint { .. })));
    // a dense model has nothing to put in an adapter checkpoint
    let empty = Checkpoint::capture(CheckpointMode::Adapter, r.model(), None, TrainingMetadata::default());
    assert!(empty.model.is_empty());
    assert!(save_checkpoint(tmp.path().join("y"), &empty).is_err());
    // and a dense config cannot pair with the adapter checkpointer at all
    assert!(setup(tmp.path(), &["checkpointer._component_=minitune.checkpoint.AdapterCheckpointer"]).is_err());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = trained(tmp.path(), &[]);
    let ckpt = load_checkpoint(&dir).unwrap();
    let wider = setup(tmp.path(), &["model.embed_dim=64", "checkpointer=~"]).unwrap();
    assert!(ckpt.restore_model(wider.model()).is_err());

    let (_, lora_dir) = trained(&tmp.path().join("lora"), &LORA);
    let adapter = load_checkpoint(&lora_dir).unwrap();
    let mut ranked = LORA.to_vec();
    ranked.push("model.lora_rank=2");
    let other_rank = setup(&tmp.path().join("lora"), &ranked).unwrap();
    match adapter.restore_model(other_rank.model()) {
        Err(RecipeError::Checkpoint { message, .. }) => assert!(message.contains("shape"), "{message}"),
        other => panic!("{other:?}"),
    }
    let mut fewer = LORA.to_vec();
    fewer.push("model.lora_attn_modules=[q_proj]");
    let fewer_targets = setup(&tmp.path().join("lora"), &fewer).unwrap();
    assert!(adapter.restore_model(fewer_targets.model()).is_err());
}

#[test]
fn damaged_files_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = trained(tmp.path(), &[]);

    let truncated = tmp.path().join("truncated");
    copy_dir(&dir, &truncated);
    let blob = fs::read(truncated.join(BLOB_FILE)).unwrap();
    fs::write(truncated.join(BLOB_FILE), &blob[..blob.len() - 4]).unwrap();
    match load_checkpoint(&truncated) {
        Err(RecipeError::Checkpoint { message, .. }) => assert!(message.contains("outside"), "{message}"),
        other => panic!("{other:?}"),
    }

    let versioned = tmp.path().join("versioned");
    copy_dir(&dir, &versioned);
    let mut m = manifest(&versioned);
    m.format_version = FORMAT_VERSION + 1;
    write_manifest(&versioned, &m);
    match load_checkpoint(&versioned) {
        Err(RecipeError::Checkpoint { message, .. }) => assert!(message.contains("version"), "{message}"),
        other => panic!("{other:?}"),
    }

    let garbled = tmp.path().join("garbled");
    copy_dir(&dir, &garbled);
    fs::write(garbled.join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(matches!(load_checkpoint(&garbled), Err(RecipeError::Checkpoint { .. })));

    let missing = tmp.path().join("missing");
    copy_dir(&dir, &missing);
    fs::remove_file(missing.join(BLOB_FILE)).unwrap();
    assert!(matches!(load_checkpoint(&missing), Err(RecipeError::Io { .. })));
}

#[test]
fn manifest_validation_catches_bad_indexes() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = trained(tmp.path(), &[]);
    let good = manifest(&dir);
    let blob_len = fs::metadata(dir.join(BLOB_FILE)).unwrap().len();
    validate_manifest(&good, blob_len).unwrap();

    let mut overlap = good.clone();
    let second = overlap.tensors.values().map(|e| e.offset).filter(|&o| o > 0).min().unwrap();
    overlap.tensors.values_mut().find(|e| e.offset == second).unwrap().offset -= 4;
    assert!(validate_manifest(&overlap, blob_len).unwrap_err().contains("overlap"));

    let mut bad_len = good.clone();
    bad_len.tensors.values_mut().next().unwrap().length += 4;
    assert!(validate_manifest(&bad_len, blob_len).is_err());

    let mut unindexed = good.clone();
    unindexed.model_tensors.push("ghost.weight".into());
    assert!(validate_manifest(&unindexed, blob_len).unwrap_err().contains("ghost.weight"));

    let mut stray = good;
    stray.optimizer_state = false;
    assert!(validate_manifest(&stray, blob_len).is_err());
}

#[test]
fn resume_checks_seed_and_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = trained(tmp.path(), &[]);
    let resume = format!("checkpointer.checkpoint_dir={}", dir.display());

    let ok = setup(tmp.path(), &["resume_from_checkpoint=True", &resume, "max_steps=5"]).unwrap();
    assert_eq!(ok.global_step(), 3);

    match setup(tmp.path(), &["resume_from_checkpoint=True", &resume, "seed=4"]) {
        Err(RecipeError::Checkpoint { message, .. }) => assert!(message.contains("seed"), "{message}"),
        other => panic!("{:?}", other.err()),
    }
    assert!(matches!(
        setup(tmp.path(), &["resume_from_checkpoint=True"]),
        Err(RecipeError::Config { key, .. }) if key == "resume_from_checkpoint"
    ));

    let no_state = tmp.path().join("no_state");
    let mut ckpt = load_checkpoint(&dir).unwrap();
    ckpt.optimizer = None;
    save_checkpoint(&no_state, &ckpt).unwrap();
    let resume = format!("checkpointer.checkpoint_dir={}", no_state.display());
    assert!(setup(tmp.path(), &["resume_from_checkpoint=True", &resume]).is_err());
}
