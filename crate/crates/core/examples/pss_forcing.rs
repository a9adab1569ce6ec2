//! Shows where each phonological feature lives under semi-supervision and
//! how often a trained model puts the labelled code in its designated slot.
//!
//! cargo run --release --example pss_forcing -- [pss|full] [steps]

use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::experiment::{prepare_splits, train_variant};
use vq_sign::model::{build_model, ModelVariant};

fn main() -> vq_sign::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: ModelVariant = args.next().as_deref().unwrap_or("pss").parse()?;
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus = CorpusConfig {
        signs: 120,
        instances_per_sign: 4,
        ..CorpusConfig::default()
    };
    cfg.model.pss.p_force = 1.0;
    cfg.train.steps = steps;
    cfg.train.dead_code_interval = (steps / 20).max(1);
    cfg.train.gumbel.decay_steps = steps as f64 / 20.0;

    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let shape = build_model(variant, &cfg.model, &schema, 0)?;
    println!("{:<20} {:<6} {:>4}  {:<10} codes", "feature", "stream", "slot", "book");
    for s in &shape.slots {
        println!("{:<20} {:<6} {:>4}  {:<10} {:?}", s.feature.name(), s.channel.as_str(), s.slot, s.book, s.codes);
    }

    let (train, _) = prepare_splits(&shape, &records, &split)?;
    let (model, _) = train_variant(&cfg, variant, 0, &schema, &train, |_| Ok(()))?;
    let mut hits = vec![0usize; model.slots.len()];
    for p in &train {
        let labels = p.labels.expect("prepared with labels");
        for (j, (s, k)) in model.slots.iter().zip(model.designated_indices(p)?).enumerate() {
            hits[j] += usize::from(k == s.codes.start + labels.get(s.feature));
        }
    }
    println!("\nafter {steps} steps with every designated slot forced:");
    for (s, h) in model.slots.iter().zip(&hits) {
        println!("  {:<20} {:<6} {:>5.1}%", s.feature.name(), s.channel.as_str(), 100.0 * *h as f64 / train.len() as f64);
    }
    Ok(())
}
