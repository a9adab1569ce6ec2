//! Saves a briefly trained model with its optimizer state, restores it and
//! checks that both copies encode identically.

use vq_sign::checkpoint::Checkpoint;
use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::experiment::{prepare_splits, train_variant};
use vq_sign::model::{build_model, ModelVariant};

fn main() -> vq_sign::Result<()> {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus = CorpusConfig {
        signs: 30,
        instances_per_sign: 2,
        ..CorpusConfig::default()
    };
    cfg.train.steps = 20;
    cfg.train.batch_size = 8;
    cfg.train.dead_code_interval = 10;

    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let shape = build_model(ModelVariant::Full, &cfg.model, &schema, 0)?;
    let (train, _) = prepare_splits(&shape, &records, &split)?;
    let (model, state) = train_variant(&cfg, ModelVariant::Full, 0, &schema, &train, |_| Ok(()))?;

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("checkpoint.json");
    let ckpt = Checkpoint::capture(&model, Some(&state));
    ckpt.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let restored = loaded.restore()?;
    println!(
        "{} tensors, {} codebooks, step {}, sha256 {}",
        loaded.params.len(),
        loaded.books.len(),
        loaded.train_state.as_ref().map_or(0, |s| s.step),
        &loaded.digest()?[..16]
    );
    let same = model.code_indices(&[&train[0]])? == restored.code_indices(&[&train[0]])?;
    println!("restored model assigns identical codes: {same}");
    Ok(())
}
