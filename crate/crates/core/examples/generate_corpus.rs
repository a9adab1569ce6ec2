//! Renders a small synthetic corpus, writes it to disk and reads it back.
//!
//! cargo run --example generate_corpus -- [signs] [instances]

use vq_sign::corpus::{generate_corpus, read_dataset, write_dataset, CorpusConfig, Feature, PhonoFeatureSchema};

fn main() -> vq_sign::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("a count"));
    let cfg = CorpusConfig {
        signs: args.next().unwrap_or(40),
        instances_per_sign: args.next().unwrap_or(3),
        ..CorpusConfig::default()
    };
    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg)?;
    println!(
        "{} records, vocabulary split {} / {} / {} glosses",
        records.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let first = &records[0];
    println!(
        "gloss {} by signer {}: {} frames x {} keypoints",
        first.gloss_id,
        first.signer_id,
        first.pose.frame_count(),
        first.pose.joint_count()
    );
    for f in Feature::ALL.iter().take(5) {
        println!("  {:<18} class {} of {}", f.name(), first.labels.get(*f), schema.classes(*f));
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("corpus.slds");
    write_dataset(&records, &split, &schema, &path)?;
    let (back, split_back, _) = read_dataset(&path)?;
    assert_eq!(back, records);
    assert_eq!(split_back, split);
    println!("wrote and re-read {} ({} bytes)", path.display(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    Ok(())
}

