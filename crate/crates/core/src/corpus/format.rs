//! `.slds`: line-delimited JSON. Line 1 is the header, each further line one
//! record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Feature, PhonoFeatureSchema, PhonoLabels, SignRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::pose::{PoseSequence, SkeletonLayout};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u64,
    layout: SkeletonLayout,
    schema: PhonoFeatureSchema,
    split: SplitSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    gloss_id: usize,
    signer_id: u64,
    labels: BTreeMap<String, usize>,
    frames: Vec<Vec<[f64; 3]>>,
}

pub fn write_dataset(records: &[SignRecord], split: &SplitSpec, schema: &PhonoFeatureSchema, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let layout = SkeletonLayout::default();
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        format_version: FORMAT_VERSION,
        layout: layout.clone(),
        schema: schema.clone(),
        split: split.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        if r.pose.joint_count() != layout.joint_count() {
            return Err(crate::error::shape(format!(
                "record with {} keypoints does not match the {}-keypoint layout",
                r.pose.joint_count(),
                layout.joint_count()
            )));
        }
        let line = Line {
            gloss_id: r.gloss_id,
            signer_id: r.signer_id,
            labels: Feature::ALL.iter().map(|f| (f.name().to_string(), r.labels.get(*f))).collect(),
            frames: r
                .pose
                .frames()
                .outer_iter()
                .map(|f| f.outer_iter().map(|k| [k[0], k[1], k[2]]).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SignRecord>, SplitSpec, PhonoFeatureSchema)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse = |line: usize, message: String| Error::Parse { line, message };

    let first = lines.next().ok_or_else(|| parse(1, "missing header".into()))?.map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(parse(1, "header lacks format_version".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| parse(1, e.to_string()))?;
    header.layout.validate().map_err(|e| parse(1, e.to_string()))?;
    header.schema.validate().map_err(|e| parse(1, e.to_string()))?;
    header.split.validate().map_err(|e| parse(1, e.to_string()))?;
    let joints = header.layout.joint_count();

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| parse(n, e.to_string()))?;
        let mut labels = PhonoLabels::new([0; 16]);
        if rec.labels.len() != Feature::ALL.len() {
            return Err(parse(n, format!("expected 16 labels, found {}", rec.labels.len())));
        }
        for (name, class) in &rec.labels {
            let f: Feature = name.parse().map_err(|e: Error| parse(n, e.to_string()))?;
            labels.set(f, *class);
        }
        header.schema.check_labels(&labels).map_err(|e| parse(n, e.to_string()))?;
        let t = rec.frames.len();
        if rec.frames.iter().any(|f| f.len() != joints) {
            return Err(parse(n, format!("every frame must hold {joints} keypoints")));
        }
        let flat: Vec<f64> = rec.frames.into_iter().flatten().flatten().collect();
        let arr = Array3::from_shape_vec((t, joints, 3), flat).map_err(|e| parse(n, e.to_string()))?;
        let pose = PoseSequence::new(arr).map_err(|e| parse(n, e.to_string()))?;
        records.push(SignRecord {
            pose,
            gloss_id: rec.gloss_id,
            labels,
            signer_id: rec.signer_id,
        });
    }
    Ok((records, header.split, header.schema))
}
