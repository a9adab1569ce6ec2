//! Skeleton layout, pose sequences, and the split of a pose into the six
//! articulator streams.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

pub const HAND_KEYPOINTS: usize = 21;

/// Named keypoint groups. Every keypoint belongs to exactly one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonLayout {
    pub right_hand: Range<usize>,
    pub left_hand: Range<usize>,
    pub face: Range<usize>,
    pub body: Range<usize>,
    pub wrist_right: usize,
    pub wrist_left: usize,
    pub nose: usize,
}

impl Default for SkeletonLayout {
    fn default() -> Self {
        SkeletonLayout::new(20, 13)
    }
}

impl SkeletonLayout {
    /// Hands first (right, left; wrist at offset 0), then face (nose first),
    /// then body.
    pub fn new(face: usize, body: usize) -> Self {
        let rh = 0..HAND_KEYPOINTS;
        let lh = HAND_KEYPOINTS..2 * HAND_KEYPOINTS;
        let fc = lh.end..lh.end + face;
        let bd = fc.end..fc.end + body;
        SkeletonLayout {
            wrist_right: rh.start,
            wrist_left: lh.start,
            nose: fc.start,
            right_hand: rh,
            left_hand: lh,
            face: fc,
            body: bd,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.right_hand.len() + self.left_hand.len() + self.face.len() + self.body.len()
    }

    /// Checks disjointness, coverage of `0..J` and wrist/nose membership.
    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        let mut seen = vec![0u8; j];
        for g in [&self.right_hand, &self.left_hand, &self.face, &self.body] {
            for i in g.clone() {
                if i >= j {
                    return Err(Error::Config(format!("keypoint index {i} outside 0..{j}")));
                }
                seen[i] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Config("keypoint groups must be disjoint and cover every index".into()));
        }
        if self.right_hand.len() != HAND_KEYPOINTS || self.left_hand.len() != HAND_KEYPOINTS {
            return Err(Error::Config("hand groups must hold 21 keypoints".into()));
        }
        if !self.right_hand.contains(&self.wrist_right)
            || !self.left_hand.contains(&self.wrist_left)
            || !self.face.contains(&self.nose)
        {
            return Err(Error::Config("wrist/nose index outside its group".into()));
        }
        Ok(())
    }

    /// Keypoint indices read by a stream before normalization.
    pub fn stream_sources(&self, id: StreamId) -> Vec<usize> {
        match id {
            StreamId::Rh => self.right_hand.clone().collect(),
            StreamId::Lh => self.left_hand.clone().collect(),
            StreamId::Nmm => self.face.clone().collect(),
            StreamId::Body => self.body.clone().collect(),
            StreamId::Movr => vec![self.wrist_right],
            StreamId::Movl => vec![self.wrist_left],
        }
    }
}

/// `T x J x 3` keypoint coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Array3<f64>,
}

impl PoseSequence {
    pub fn new(frames: Array3<f64>) -> Result<Self> {
        let (t, _, c) = frames.dim();
        if c != 3 {
            return Err(shape(format!("pose coordinates must be 3-D, got {c}")));
        }
        if t < 2 {
            return Err(invalid(format!("pose needs at least 2 frames, got {t}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pose contains non-finite coordinates"));
        }
        Ok(PoseSequence { frames })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    pub fn joint_count(&self) -> usize {
        self.frames.dim().1
    }

    /// `T x 3J` frame-major matrix.
    pub fn flatten(&self) -> Array2<f64> {
        flatten_stream(&self.frames)
    }
}

/// The six articulator streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StreamId {
    Rh,
    Lh,
    Nmm,
    Body,
    Movr,
    Movl,
}

impl StreamId {
    pub const ALL: [StreamId; 6] = [
        StreamId::Rh,
        StreamId::Lh,
        StreamId::Nmm,
        StreamId::Body,
        StreamId::Movr,
        StreamId::Movl,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamId::Rh => "RH",
            StreamId::Lh => "LH",
            StreamId::Nmm => "NMM",
            StreamId::Body => "BODY",
            StreamId::Movr => "MOVR",
            StreamId::Movl => "MOVL",
        }
    }

    /// Movement streams keep every frame; the others are frame-sampled.
    pub fn keeps_all_frames(self) -> bool {
        matches!(self, StreamId::Movr | StreamId::Movl)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown stream `{s}`")))
    }
}

/// Per-stream sub-sequences, each `frames x keypoints x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBundle {
    streams: [Array3<f64>; 6],
}

impl StreamBundle {
    pub fn get(&self, id: StreamId) -> &Array3<f64> {
        &self.streams[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StreamId, &Array3<f64>)> {
        StreamId::ALL.into_iter().map(move |id| (id, &self.streams[id.index()]))
    }
}

/// `S` indices `round(i (T-1) / (S-1))`, strictly increasing from 0 to `T-1`.
pub fn uniform_frame_sample(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || total == 0 {
        return Err(invalid("frame counts must be positive"));
    }
    if count > total {
        return Err(invalid(format!("cannot sample {count} frames from {total}")));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    // integer round-half-up of i*(T-1)/(S-1)
    let (num, den) = (total - 1, count - 1);
    Ok((0..count).map(|i| (2 * i * num + den) / (2 * den)).collect())
}

/// Splits a pose into the six streams. Hand streams are translated so the
/// wrist sits at the origin, the face so the nose does; body keypoints stay
/// raw. Movement streams are the raw wrist trajectories over all frames.
pub fn partition_pose(pose: &PoseSequence, layout: &SkeletonLayout, sample_count: usize) -> Result<StreamBundle> {
    if pose.joint_count() != layout.joint_count() {
        return Err(shape(format!(
            "pose has {} keypoints but layout describes {}",
            pose.joint_count(),
            layout.joint_count()
        )));
    }
    let frames = pose.frames();
    let idx = uniform_frame_sample(pose.frame_count(), sample_count)?;
    let sampled = frames.select(Axis(0), &idx);

    let relative = |group: &Range<usize>, anchor: usize| {
        let mut out = sampled.slice(s![.., group.clone(), ..]).to_owned();
        for (f, mut frame) in out.outer_iter_mut().enumerate() {
            let origin = sampled.slice(s![f, anchor, ..]).to_owned();
            for mut kp in frame.outer_iter_mut() {
                kp -= &origin;
            }
        }
        out
    };
    let trajectory = |joint: usize| frames.slice(s![.., joint..joint + 1, ..]).to_owned();

    Ok(StreamBundle {
        streams: [
            relative(&layout.right_hand, layout.wrist_right),
            relative(&layout.left_hand, layout.wrist_left),
            relative(&layout.face, layout.nose),
            sampled.slice(s![.., layout.body.clone(), ..]).to_owned(),
            trajectory(layout.wrist_right),
            trajectory(layout.wrist_left),
        ],
    })
}

/// `frames x keypoints x 3` to `frames x (3 * keypoints)`.
pub fn flatten_stream(sub: &Array3<f64>) -> Array2<f64> {
    let (t, k, c) = sub.dim();
    let data: Vec<f64> = sub.iter().copied().collect();
    Array2::from_shape_vec((t, k * c), data).expect("contiguous reshape")
}

/// Inverse of [`flatten_stream`].
pub fn unflatten_stream(m: &Array2<f64>, keypoints: usize) -> Result<Array3<f64>> {
    let (t, w) = m.dim();
    if keypoints == 0 || w != keypoints * 3 {
        return Err(shape(format!("{w} columns cannot hold {keypoints} keypoints")));
    }
    let data: Vec<f64> = m.iter().copied().collect();
    Ok(Array3::from_shape_vec((t, keypoints, 3), data).expect("contiguous reshape"))
}
