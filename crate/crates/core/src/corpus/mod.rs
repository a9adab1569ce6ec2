//! Synthetic compositional sign corpus: phonological feature schema,
//! vocabularies, disjoint-vocabulary splits and the `.slds` file format.

mod format;
mod render;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pose::{PoseSequence, StreamId};

pub use format::{read_dataset, write_dataset, FORMAT_VERSION};
pub use render::{render_sign, SignerStyle};

/// The sixteen lexical phonology features, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    MajorLocation,
    MinorLocation,
    SelectedFingers,
    Flexion,
    FlexionChange,
    Spread,
    SpreadChange,
    ThumbPosition,
    ThumbContact,
    SignType,
    Movement,
    RepeatedMovement,
    WristTwist,
    NonManualSignal,
    MouthMorpheme,
    HeadMovement,
}

impl Feature {
    pub const ALL: [Feature; 16] = [
        Feature::MajorLocation,
        Feature::MinorLocation,
        Feature::SelectedFingers,
        Feature::Flexion,
        Feature::FlexionChange,
        Feature::Spread,
        Feature::SpreadChange,
        Feature::ThumbPosition,
        Feature::ThumbContact,
        Feature::SignType,
        Feature::Movement,
        Feature::RepeatedMovement,
        Feature::WristTwist,
        Feature::NonManualSignal,
        Feature::MouthMorpheme,
        Feature::HeadMovement,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::MajorLocation => "Major Location",
            Feature::MinorLocation => "Minor Location",
            Feature::SelectedFingers => "Selected Fingers",
            Feature::Flexion => "Flexion",
            Feature::FlexionChange => "Flexion Change",
            Feature::Spread => "Spread",
            Feature::SpreadChange => "Spread Change",
            Feature::ThumbPosition => "Thumb Position",
            Feature::ThumbContact => "Thumb Contact",
            Feature::SignType => "Sign Type",
            Feature::Movement => "Movement",
            Feature::RepeatedMovement => "Repeated Movement",
            Feature::WristTwist => "Wrist Twist",
            Feature::NonManualSignal => "Non-Manual Signal",
            Feature::MouthMorpheme => "Mouth Morpheme",
            Feature::HeadMovement => "Head Movement",
        }
    }

    /// Streams whose input carries this feature.
    pub fn streams(self) -> &'static [StreamId] {
        use Feature::*;
        match self {
            MajorLocation | MinorLocation => &[StreamId::Body],
            SelectedFingers | Flexion | Spread | ThumbPosition | ThumbContact | SignType => &[StreamId::Lh, StreamId::Rh],
            FlexionChange | SpreadChange | Movement | RepeatedMovement | WristTwist => &[StreamId::Movl, StreamId::Movr],
            NonManualSignal | MouthMorpheme | HeadMovement => &[StreamId::Nmm],
        }
    }

    pub fn default_classes(self) -> usize {
        use Feature::*;
        match self {
            SelectedFingers => 8,
            Flexion | MinorLocation | SignType => 4,
            Movement => 6,
            MajorLocation => 5,
            NonManualSignal | MouthMorpheme | HeadMovement => 3,
            FlexionChange | Spread | SpreadChange | ThumbPosition | ThumbContact | RepeatedMovement | WristTwist => 2,
        }
    }

    /// Largest class count the renderer can keep visually distinct.
    pub fn max_classes(self) -> usize {
        match self {
            Feature::SelectedFingers => 15,
            _ => 64,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown phonological feature {s:?}")))
    }
}

impl Serialize for Feature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Feature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature: Feature,
    pub classes: usize,
    pub streams: Vec<StreamId>,
}

/// Class counts and stream assignment for the sixteen features, stored in
/// `Feature::ALL` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonoFeatureSchema {
    features: Vec<FeatureSpec>,
}

impl Default for PhonoFeatureSchema {
    fn default() -> Self {
        PhonoFeatureSchema {
            features: Feature::ALL
                .iter()
                .map(|&f| FeatureSpec {
                    feature: f,
                    classes: f.default_classes(),
                    streams: f.streams().to_vec(),
                })
                .collect(),
        }
    }
}

impl PhonoFeatureSchema {
    /// Default schema with some class counts replaced.
    pub fn with_classes(overrides: &[(Feature, usize)]) -> Result<Self> {
        let mut s = Self::default();
        for &(f, c) in overrides {
            s.features[f.index()].classes = c;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != Feature::ALL.len() {
            return Err(Error::Config(format!("schema must list 16 features, found {}", self.features.len())));
        }
        for (spec, f) in self.features.iter().zip(Feature::ALL) {
            if spec.feature != f {
                return Err(Error::Config(format!("schema entry {:?} out of order, expected {:?}", spec.feature.name(), f.name())));
            }
            if spec.classes < 2 || spec.classes > f.max_classes() {
                return Err(Error::Config(format!("{} needs 2..={} classes, got {}", f, f.max_classes(), spec.classes)));
            }
            if spec.streams.is_empty() {
                return Err(Error::Config(format!("{f} is not assigned to any stream")));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn classes(&self, f: Feature) -> usize {
        self.features[f.index()].classes
    }

    pub fn streams(&self, f: Feature) -> &[StreamId] {
        &self.features[f.index()].streams
    }

    /// Number of distinct label combinations, `None` on overflow.
    pub fn combinations(&self) -> Option<u128> {
        self.features.iter().try_fold(1u128, |acc, s| acc.checked_mul(s.classes as u128))
    }

    pub fn check_labels(&self, labels: &PhonoLabels) -> Result<()> {
        for spec in &self.features {
            let c = labels.get(spec.feature);
            if c >= spec.classes {
                return Err(invalid(format!("{} class {c} outside 0..{}", spec.feature, spec.classes)));
            }
        }
        Ok(())
    }
}

/// One class index per feature, indexed by `Feature::index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhonoLabels([usize; 16]);

impl PhonoLabels {
    pub fn new(classes: [usize; 16]) -> Self {
        PhonoLabels(classes)
    }

    pub fn get(&self, f: Feature) -> usize {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: Feature, class: usize) {
        self.0[f.index()] = class;
    }

    pub fn as_array(&self) -> &[usize; 16] {
        &self.0
    }
}

/// One sample of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SignRecord {
    pub pose: PoseSequence,
    pub gloss_id: usize,
    pub labels: PhonoLabels,
    pub signer_id: u64,
}

/// Disjoint gloss vocabularies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeSet<usize>,
    pub validation: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let overlap = self.train.intersection(&self.validation).next().is_some()
            || self.train.intersection(&self.test).next().is_some()
            || self.validation.intersection(&self.test).next().is_some();
        if overlap {
            return Err(Error::Config("split gloss sets overlap".into()));
        }
        Ok(())
    }
}

/// `n_signs` distinct label combinations, gloss ids `0..n_signs`.
pub fn build_vocabulary(schema: &PhonoFeatureSchema, n_signs: usize, seed: u64) -> Result<Vec<(usize, PhonoLabels)>> {
    schema.validate()?;
    let space = schema.combinations();
    if let Some(space) = space {
        if n_signs as u128 > space {
            return Err(Error::Capacity(format!("{n_signs} signs requested but only {space} label combinations exist")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radices: Vec<usize> = schema.features().iter().map(|s| s.classes).collect();
    let decode = |mut code: u128| {
        let mut out = [0usize; 16];
        for (slot, &r) in out.iter_mut().zip(&radices) {
            *slot = (code % r as u128) as usize;
            code /= r as u128;
        }
        PhonoLabels(out)
    };
    let labels: Vec<PhonoLabels> = match space {
        // dense draws: sample codes without replacement
        Some(space) if space <= 4 * n_signs as u128 => {
            let space = space as usize;
            rand::seq::index::sample(&mut rng, space, n_signs).into_iter().map(|c| decode(c as u128)).collect()
        }
        _ => {
            let mut seen = HashSet::with_capacity(n_signs);
            let mut out = Vec::with_capacity(n_signs);
            while out.len() < n_signs {
                let mut l = [0usize; 16];
                for (slot, &r) in l.iter_mut().zip(&radices) {
                    *slot = rng.random_range(0..r);
                }
                if seen.insert(l) {
                    out.push(PhonoLabels(l));
                }
            }
            out
        }
    };
    Ok(labels.into_iter().enumerate().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub signs: usize,
    pub instances_per_sign: usize,
    pub signers: usize,
    /// Train, validation and test fractions of the vocabulary.
    pub splits: [f64; 3],
    pub noise_scale: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            signs: 600,
            instances_per_sign: 10,
            signers: 8,
            splits: [0.8, 0.1, 0.1],
            noise_scale: 0.01,
            min_frames: 24,
            max_frames: 48,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.splits.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("splits must be fractions summing to 1, got {:?}", self.splits)));
        }
        if self.signs == 0 || self.instances_per_sign == 0 || self.signers == 0 {
            return Err(Error::Config("signs, instances_per_sign and signers must be positive".into()));
        }
        if self.min_frames < render::MIN_FRAMES || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range {}..={} must start at {} or more",
                self.min_frames,
                self.max_frames,
                render::MIN_FRAMES
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Splits gloss ids `0..n` by rounding cumulative fractions.
pub fn split_vocabulary(n: usize, fractions: [f64; 3], seed: u64) -> SplitSpec {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17));
    let a = (fractions[0] * n as f64).round() as usize;
    let b = ((fractions[0] + fractions[1]) * n as f64).round().min(n as f64) as usize;
    SplitSpec {
        train: ids[..a].iter().copied().collect(),
        validation: ids[a..b].iter().copied().collect(),
        test: ids[b..].iter().copied().collect(),
    }
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders the whole corpus. Record `i` depends only on `(seed, i)`.
pub fn generate_corpus(schema: &PhonoFeatureSchema, cfg: &CorpusConfig) -> Result<(Vec<SignRecord>, SplitSpec)> {
    cfg.validate()?;
    let vocab = build_vocabulary(schema, cfg.signs, mix_seed(cfg.seed, 1))?;
    let split = split_vocabulary(cfg.signs, cfg.splits, mix_seed(cfg.seed, 2));
    let mut records = Vec::with_capacity(cfg.signs * cfg.instances_per_sign);
    for (gloss_id, labels) in &vocab {
        for inst in 0..cfg.instances_per_sign {
            let index = (gloss_id * cfg.instances_per_sign + inst) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + index));
            let signer_id = rng.random_range(0..cfg.signers as u64);
            let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let pose = render_sign(schema, labels, signer_id, cfg.noise_scale, frames, rng.random())?;
            records.push(SignRecord {
                pose,
                gloss_id: *gloss_id,
                labels: *labels,
                signer_id,
            });
        }
    }
    Ok((records, split))
}
