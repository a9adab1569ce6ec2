//! Procedural renderer: one pose factor per phonological feature.
//!
//! Every component is snapped to a dyadic grid before composition, so the
//! hand points are `wrist + local` with an exact sum and subtracting the
//! wrist again recovers the local shape bit for bit.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mix_seed, Feature, PhonoFeatureSchema, PhonoLabels};
use crate::error::{invalid, Result};
use crate::pose::{PoseSequence, SkeletonLayout, HAND_KEYPOINTS};

pub const MIN_FRAMES: usize = 16;

const FACE_POINTS: usize = 20;
const BODY_POINTS: usize = 13;
const GRID: f64 = 65536.0;
/// Length of one renderer unit in output coordinates.
const UNIT: f64 = 6.0;

type P3 = [f64; 3];

fn snap(v: P3) -> P3 {
    v.map(|x| (x * GRID).round() / GRID)
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: P3, k: f64) -> P3 {
    a.map(|x| x * k)
}

fn lerp3(a: P3, b: P3, t: f64) -> P3 {
    add(a, scale(sub(b, a), t))
}

fn mirror(a: P3) -> P3 {
    [-a[0], a[1], a[2]]
}

fn rot_x(a: P3, t: f64) -> P3 {
    let (s, c) = t.sin_cos();
    [a[0], c * a[1] - s * a[2], s * a[1] + c * a[2]]
}

fn rot_y(a: P3, t: f64) -> P3 {
    let (s, c) = t.sin_cos();
    [c * a[0] + s * a[2], a[1], -s * a[0] + c * a[2]]
}

fn rot_z(a: P3, t: f64) -> P3 {
    let (s, c) = t.sin_cos();
    [c * a[0] - s * a[1], s * a[0] + c * a[1], a[2]]
}

/// Class position in `[0, 1]`.
fn frac(class: usize, classes: usize) -> f64 {
    class as f64 / (classes - 1) as f64
}

/// Per-signer body proportions, a pure function of the signer id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignerStyle {
    pub scale: f64,
    pub shoulder_width: f64,
    pub arm: f64,
    pub hand: f64,
    pub face: f64,
    pub head_shift: f64,
}

impl SignerStyle {
    pub fn for_signer(signer_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(signer_id, 0x51_9e));
        SignerStyle {
            scale: rng.random_range(0.9..1.1),
            shoulder_width: rng.random_range(0.36..0.44),
            arm: rng.random_range(0.9..1.1),
            hand: rng.random_range(0.85..1.15),
            face: rng.random_range(0.9..1.1),
            head_shift: rng.random_range(-0.02..0.02),
        }
    }
}

// index, middle, ring, pinky
const FINGER_MASKS: [[bool; 4]; 15] = [
    [true, false, false, false],
    [true, true, false, false],
    [true, true, true, false],
    [true, true, true, true],
    [false, true, false, false],
    [false, false, false, true],
    [true, false, false, true],
    [false, true, true, false],
    [false, false, true, false],
    [true, false, true, false],
    [false, true, false, true],
    [false, false, true, true],
    [true, true, false, true],
    [true, false, true, true],
    [false, true, true, true],
];

/// Right-hand keypoints relative to the wrist, palm facing +z.
fn right_hand_shape(schema: &PhonoFeatureSchema, l: &PhonoLabels, size: f64) -> [P3; HAND_KEYPOINTS] {
    let f = |feat: Feature| frac(l.get(feat), schema.classes(feat));
    let mask = FINGER_MASKS[l.get(Feature::SelectedFingers)];
    let flex = 1.2 * f(Feature::Flexion);
    let spread = 0.25 * f(Feature::Spread);
    let mut pts = [[0.0; 3]; HAND_KEYPOINTS];

    let bases = [-0.03, -0.01, 0.01, 0.03];
    let lengths = [1.0, 1.1, 1.0, 0.8];
    for finger in 0..4 {
        let bend = if mask[finger] { flex } else { 1.45 };
        let fan = spread * (finger as f64 - 1.5);
        let mut p = [bases[finger], 0.09, 0.0];
        pts[5 + 4 * finger] = p;
        let mut angle = 0.0;
        for (j, seg) in [0.04, 0.025, 0.02].iter().enumerate() {
            angle += bend;
            let dir = rot_z(rot_x([0.0, 1.0, 0.0], angle), -fan);
            p = add(p, scale(dir, seg * lengths[finger]));
            pts[6 + 4 * finger + j] = p;
        }
    }

    let abduct = 0.3 + 0.8 * f(Feature::ThumbPosition);
    let mut p = [-0.02, 0.02, 0.01];
    pts[1] = p;
    let dir = rot_z([0.0, 1.0, 0.0], abduct);
    for (j, seg) in [0.035, 0.03, 0.025].iter().enumerate() {
        p = add(p, scale(rot_x(dir, 0.2 * j as f64), *seg));
        pts[2 + j] = p;
    }
    let contact = 0.8 * f(Feature::ThumbContact);
    let index_tip = pts[8];
    pts[4] = lerp3(pts[4], index_tip, contact);
    pts[3] = lerp3(pts[3], lerp3(pts[2], pts[4], 0.5), contact);

    pts.map(|p| scale(p, size))
}

fn face_template() -> [P3; FACE_POINTS] {
    [
        [0.0, 0.0, 0.02],
        [-0.045, 0.03, -0.02],
        [-0.015, 0.03, -0.01],
        [0.015, 0.03, -0.01],
        [0.045, 0.03, -0.02],
        [-0.05, 0.055, -0.02],
        [-0.018, 0.058, -0.01],
        [0.018, 0.058, -0.01],
        [0.05, 0.055, -0.02],
        [-0.025, -0.045, -0.01],
        [0.0, -0.038, 0.0],
        [0.025, -0.045, -0.01],
        [0.0, -0.052, 0.0],
        [-0.07, -0.02, -0.05],
        [-0.05, -0.07, -0.04],
        [0.0, -0.09, -0.02],
        [0.05, -0.07, -0.04],
        [0.07, -0.02, -0.05],
        [-0.08, 0.02, -0.07],
        [0.08, 0.02, -0.07],
    ]
}

fn face_shape(schema: &PhonoFeatureSchema, l: &PhonoLabels, size: f64, u: f64) -> [P3; FACE_POINTS] {
    let f = |feat: Feature| frac(l.get(feat), schema.classes(feat));
    let mut pts = face_template();
    let brow = -0.012 + 0.027 * f(Feature::NonManualSignal);
    for p in &mut pts[5..9] {
        p[1] += brow;
    }
    let open = 0.02 * f(Feature::MouthMorpheme);
    let narrow = 0.013 * f(Feature::MouthMorpheme);
    pts[9][0] += narrow;
    pts[11][0] -= narrow;
    pts[10][1] += open / 3.0;
    pts[12][1] -= open;

    let head = l.get(Feature::HeadMovement);
    let (mut rx, mut ry, mut rz) = (0.0, 0.0, 0.0);
    if head > 0 {
        let amp = 0.2 * (1.0 + ((head - 1) / 3) as f64 / 3.0);
        let a = amp * (4.0 * PI * u).sin();
        match (head - 1) % 3 {
            0 => rx = a,
            1 => ry = a,
            _ => rz = a,
        }
    }
    pts.map(|p| rot_z(rot_y(rot_x(scale(p, size), rx), ry), rz))
}

/// Right wrist displacement from its neutral point.
fn wrist_path(schema: &PhonoFeatureSchema, l: &PhonoLabels, amp: f64, u: f64) -> P3 {
    let f = |feat: Feature| frac(l.get(feat), schema.classes(feat));
    let m = l.get(Feature::Movement);
    let a = amp * (1.0 + 0.5 * (m / 6) as f64);
    let periods = 1.0 + l.get(Feature::RepeatedMovement) as f64;
    let phi = 2.0 * PI * periods * u;
    let (s, c) = phi.sin_cos();
    let mut p = match m % 6 {
        0 => [0.0, 0.0, 0.0],
        1 => [a * s, 0.0, 0.0],
        2 => [0.0, a * s, 0.0],
        3 => [a * s, 0.5 * a * c * c, 0.0],
        4 => [a * s, a * c - a, 0.0],
        _ => [0.0, 0.0, a * s],
    };
    p[2] += 0.03 * f(Feature::FlexionChange) * (4.0 * PI * u).sin();
    p[1] -= 0.05 * f(Feature::SpreadChange) * u;
    p[0] += 0.02 * f(Feature::WristTwist) * (10.0 * PI * u).sin();
    p
}

/// Location target of the right hand, relative to the chest.
fn location_target(schema: &PhonoFeatureSchema, l: &PhonoLabels) -> P3 {
    const MAJOR: [P3; 5] = [
        [-0.15, 0.0, 0.35],
        [-0.1, 0.45, 0.15],
        [-0.05, 0.05, 0.12],
        [0.15, -0.05, 0.2],
        [0.05, -0.05, 0.35],
    ];
    let major = l.get(Feature::MajorLocation);
    let base = match MAJOR.get(major) {
        Some(p) => *p,
        None => {
            let t = 2.0 * PI * frac(major, schema.classes(Feature::MajorLocation));
            [0.25 * t.cos(), 0.25 * t.sin(), 0.25]
        }
    };
    let minor = l.get(Feature::MinorLocation);
    let t = 2.0 * PI * minor as f64 / schema.classes(Feature::MinorLocation) as f64;
    add(base, [0.06 * t.cos(), 0.06 * t.sin(), 0.0])
}

fn body_points(schema: &PhonoFeatureSchema, l: &PhonoLabels, st: &SignerStyle) -> [P3; BODY_POINTS] {
    let half = st.shoulder_width / 2.0;
    let rs = [-half, 0.2, 0.0];
    let ls = [half, 0.2, 0.0];
    let target = location_target(schema, l);
    let drop = [0.0, -0.18 * st.arm, 0.0];
    let arm = |shoulder: P3, target: P3| {
        let elbow = add(lerp3(shoulder, target, 0.45), drop);
        (lerp3(shoulder, elbow, 0.5), elbow, lerp3(elbow, target, 0.5))
    };
    let (ru, re, rf) = arm(rs, target);
    let (lu, le, lf) = arm(ls, mirror(target));
    [
        [0.0, 0.25, 0.0],
        rs,
        ls,
        ru,
        lu,
        re,
        le,
        rf,
        lf,
        [-0.15, -0.5, 0.0],
        [0.15, -0.5, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, -0.5, 0.0],
    ]
    .map(|p| scale(p, st.scale))
}

/// Renders `frames` frames of the sign on the default skeleton.
pub fn render_sign(
    schema: &PhonoFeatureSchema,
    labels: &PhonoLabels,
    signer_id: u64,
    noise_scale: f64,
    frames: usize,
    seed: u64,
) -> Result<PoseSequence> {
    schema.check_labels(labels)?;
    if frames < MIN_FRAMES {
        return Err(invalid(format!("at least {MIN_FRAMES} frames required, got {frames}")));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(invalid("noise_scale must be finite and non-negative"));
    }
    let layout = SkeletonLayout::default();
    let st = SignerStyle::for_signer(signer_id);
    let noise = Normal::new(0.0, noise_scale).expect("checked scale");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |p: P3| -> P3 {
        let p = scale(p, UNIT);
        if noise_scale == 0.0 {
            return snap(p);
        }
        snap(add(p, [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)]))
    };

    let hand_size = st.hand * st.scale;
    let rh = right_hand_shape(schema, labels, hand_size);
    let twist = PI * labels.get(Feature::SignType) as f64 / schema.classes(Feature::SignType) as f64;
    let lh = rh.map(|p| rot_y(mirror(p), twist));
    let body = body_points(schema, labels, &st);
    let rest_r = scale([-0.12, 0.0, 0.3], st.scale);
    let head = scale([st.head_shift, 0.45, 0.08], st.scale);
    let amp = 0.12 * st.scale * st.arm;

    let mut out = Array3::zeros((frames, layout.joint_count(), 3));
    for t in 0..frames {
        let u = t as f64 / (frames - 1) as f64;
        let path = wrist_path(schema, labels, amp, u);
        let wr = jitter(add(rest_r, path));
        let wl = jitter(mirror(add(rest_r, path)));
        let nose = jitter(head);
        let face = face_shape(schema, labels, 1.2 * st.face * st.scale, u);
        let mut put = |j: usize, p: P3| {
            for (c, v) in p.iter().enumerate() {
                out[[t, j, c]] = *v;
            }
        };
        put(layout.wrist_right, wr);
        put(layout.wrist_left, wl);
        for k in 1..HAND_KEYPOINTS {
            put(layout.right_hand.start + k, add(wr, jitter(rh[k])));
            put(layout.left_hand.start + k, add(wl, jitter(lh[k])));
        }
        put(layout.nose, nose);
        for (k, p) in face.iter().enumerate().skip(1) {
            put(layout.face.start + k, add(nose, jitter(*p)));
        }
        for (k, p) in body.iter().enumerate() {
            put(layout.body.start + k, jitter(*p));
        }
    }
    PoseSequence::new(out)
}
