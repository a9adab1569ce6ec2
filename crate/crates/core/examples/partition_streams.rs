//! Splits one synthetic pose into the six articulator streams.

use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema};
use vq_sign::pose::{flatten_stream, partition_pose, SkeletonLayout, StreamId};

fn main() -> vq_sign::Result<()> {
    let cfg = CorpusConfig {
        signs: 1,
        instances_per_sign: 1,
        ..CorpusConfig::default()
    };
    let (records, _) = generate_corpus(&PhonoFeatureSchema::default(), &cfg)?;
    let pose = &records[0].pose;
    let layout = SkeletonLayout::default();
    let streams = partition_pose(pose, &layout, 16)?;

    println!("pose: {} frames x {} keypoints", pose.frame_count(), pose.joint_count());
    for (id, sub) in streams.iter() {
        let (t, k, _) = sub.dim();
        let sources = layout.stream_sources(id);
        println!(
            "{:<5} {t:>3} frames x {k:>2} keypoints -> {:>3} features/frame, sources {}..={}",
            id.as_str(),
            flatten_stream(sub).ncols(),
            sources[0],
            sources[sources.len() - 1]
        );
    }
    let rh = streams.get(StreamId::Rh);
    println!("right wrist after normalization: {:?}", rh.slice(ndarray::s![0, 0, ..]).to_vec());
    Ok(())
}
