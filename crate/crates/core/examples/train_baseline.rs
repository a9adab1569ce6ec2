//! Trains a small single-stream model and reports reconstruction error on
//! seen and unseen glosses.
//!
//! cargo run --release --example train_baseline -- [variant] [steps]

use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::eval::{codebook_perplexity, eval_reconstruction};
use vq_sign::experiment::{prepare_splits, train_variant};
use vq_sign::model::{build_model, ModelVariant};

fn main() -> vq_sign::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: ModelVariant = args.next().as_deref().unwrap_or("baseline").parse()?;
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus = CorpusConfig {
        signs: 120,
        instances_per_sign: 4,
        ..CorpusConfig::default()
    };
    cfg.train.steps = steps;
    cfg.train.dead_code_interval = (steps / 20).max(1);
    cfg.train.gumbel.decay_steps = steps as f64 / 20.0;

    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let shape = build_model(variant, &cfg.model, &schema, 0)?;
    let (train, test) = prepare_splits(&shape, &records, &split)?;
    println!("{variant}: {} parameters, {} train / {} test records", shape.parameter_count(), train.len(), test.len());

    let every = (steps / 10).max(1);
    let (model, _) = train_variant(&cfg, variant, 0, &schema, &train, |e| {
        if e.step % every == 0 || e.step + 1 == steps {
            println!(
                "step {:>5}  loss {:.4}  recon {:.4}  codebook {:.4}  perplexity {:?}",
                e.step,
                e.total,
                e.recon,
                e.codebook,
                e.perplexity.iter().map(|p| p.round()).collect::<Vec<_>>()
            );
        }
        Ok(())
    })?;

    let (seen, unseen) = (eval_reconstruction(&model, &train)?, eval_reconstruction(&model, &test)?);
    println!("MSE seen glosses {:.4}, unseen glosses {:.4}", seen.overall, unseen.overall);
    for (channel, mse) in &unseen.channels {
        println!("  {channel:<5} {mse:.4}");
    }
    println!("eval perplexity per book {:?}", codebook_perplexity(&model, &train)?);
    Ok(())
}
