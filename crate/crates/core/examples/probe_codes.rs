//! Extracts frozen code vectors from a trained model and fits the gloss and
//! phonological-feature probes on them.
//!
//! cargo run --release --example probe_codes -- [variant] [steps]

use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::eval::evaluate;
use vq_sign::experiment::{prepare_splits, train_variant};
use vq_sign::model::{build_model, ModelVariant};

fn main() -> vq_sign::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: ModelVariant = args.next().as_deref().unwrap_or("full").parse()?;
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus = CorpusConfig {
        signs: 150,
        instances_per_sign: 6,
        ..CorpusConfig::default()
    };
    cfg.train.steps = steps;
    cfg.train.dead_code_interval = (steps / 20).max(1);
    cfg.train.gumbel.decay_steps = steps as f64 / 20.0;
    cfg.probe.epochs = 10;

    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let shape = build_model(variant, &cfg.model, &schema, 0)?;
    let (train, test) = prepare_splits(&shape, &records, &split)?;
    let (model, _) = train_variant(&cfg, variant, 0, &schema, &train, |_| Ok(()))?;

    let r = evaluate(&model, 0, &train, &test, &cfg.probe)?;
    println!("{variant} after {steps} steps ({}-dim code vectors)", model.bottleneck());
    println!("{:<24} {:>7} {:>7}", "", "MRR", "R@10");
    for (name, s) in [
        ("gloss, seen vocabulary", r.isr_iv),
        ("gloss, unseen vocabulary", r.isr_oov),
        ("features, seen", r.pfr_iv),
        ("features, unseen", r.pfr_oov),
    ] {
        println!("{name:<24} {:>7.3} {:>6.1}%", s.mrr, s.recall_at_10);
    }
    Ok(())
}
