//! Trains and evaluates all four variants on one corpus and prints the
//! comparison tables.
//!
//! cargo run --release --example ablation -- [steps] [seeds]

use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::eval::MetricsReport;
use vq_sign::experiment::{comparison_table, run_variant};
use vq_sign::model::ModelVariant;

fn main() -> vq_sign::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("a number"));
    let steps = args.next().unwrap_or(300);
    let seeds = args.next().unwrap_or(1);

    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.corpus = CorpusConfig {
        signs: 200,
        instances_per_sign: 6,
        ..CorpusConfig::default()
    };
    cfg.train.steps = steps;
    cfg.train.dead_code_interval = (steps / 20).max(1);
    cfg.train.gumbel.decay_steps = steps as f64 / 20.0;
    cfg.probe.epochs = 10;

    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let mut reports = Vec::new();
    for seed in 0..seeds {
        for v in ModelVariant::ALL {
            let t = std::time::Instant::now();
            let out = run_variant(&cfg, v, seed, &schema, &records, &split)?;
            eprintln!("{v} seed {seed}: {:.0} s", t.elapsed().as_secs_f64());
            reports.push(out.report);
        }
    }
    print!("{}", comparison_table(&reports));
    println!();
    println!("{}", MetricsReport::csv_header());
    for r in &reports {
        println!("{}", r.csv_row());
    }
    Ok(())
}
