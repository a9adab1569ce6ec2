//! The four ablation variants: a single-stream baseline, the six-stream
//! disentangled model with shared articulator codebooks, and either one
//! with forced-code phonological supervision.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{Feature, PhonoFeatureSchema, PhonoLabels, SignRecord};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::pose::{flatten_stream, partition_pose, SkeletonLayout, StreamId};
use crate::seq_model::{Decoder, Encoder, EncoderConfig, ModelRng, SeqBatch};
use crate::tape::{Gradients, Mat, Tape, Var};
use crate::vq::{assign_gumbel, assign_nearest, Codebook, QuantizeOutcome, DIVERSITY_TEMPERATURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Baseline,
    Pd,
    Pss,
    Full,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [ModelVariant::Baseline, ModelVariant::Pd, ModelVariant::Pss, ModelVariant::Full];

    pub fn multi_stream(self) -> bool {
        matches!(self, ModelVariant::Pd | ModelVariant::Full)
    }

    pub fn supervised(self) -> bool {
        matches!(self, ModelVariant::Pss | ModelVariant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Pd => "pd",
            ModelVariant::Pss => "pss",
            ModelVariant::Full => "full",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected baseline, pd, pss or full)")))
    }
}

/// Input channel of one encoder/decoder pair: the whole pose or one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    All,
    Stream(StreamId),
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::All => "ALL",
            Channel::Stream(s) => s.as_str(),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("ALL") {
            Ok(Channel::All)
        } else {
            s.parse().map(Channel::Stream)
        }
    }
}

impl Serialize for Channel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Channel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamPlan {
    pub channel: Channel,
    pub latents: usize,
    pub book: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BookPlan {
    pub name: String,
    pub size: usize,
}

/// Latent counts per channel and codebook sizes, with the sharing map
/// implied by channels naming the same book.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityPlan {
    pub streams: Vec<StreamPlan>,
    pub books: Vec<BookPlan>,
}

impl Default for CapacityPlan {
    fn default() -> Self {
        let st = |id, latents, book: &str| StreamPlan {
            channel: Channel::Stream(id),
            latents,
            book: book.into(),
        };
        let bk = |name: &str, size| BookPlan { name: name.into(), size };
        CapacityPlan {
            streams: vec![
                st(StreamId::Rh, 8, "hand"),
                st(StreamId::Lh, 8, "hand"),
                st(StreamId::Nmm, 4, "nmm"),
                st(StreamId::Body, 4, "body"),
                st(StreamId::Movr, 3, "movement"),
                st(StreamId::Movl, 3, "movement"),
            ],
            books: vec![bk("hand", 80), bk("movement", 40), bk("nmm", 40), bk("body", 40)],
        }
    }
}

impl CapacityPlan {
    pub fn single(latents: usize, codebook_size: usize) -> Self {
        CapacityPlan {
            streams: vec![StreamPlan {
                channel: Channel::All,
                latents,
                book: "all".into(),
            }],
            books: vec![BookPlan {
                name: "all".into(),
                size: codebook_size,
            }],
        }
    }

    pub fn is_multi_stream(&self) -> bool {
        self.streams.iter().any(|s| s.channel != Channel::All)
    }

    pub fn total_latents(&self) -> usize {
        self.streams.iter().map(|s| s.latents).sum()
    }

    pub fn total_codes(&self) -> usize {
        self.books.iter().map(|b| b.size).sum()
    }

    pub fn book_index(&self, name: &str) -> Option<usize> {
        self.books.iter().position(|b| b.name == name)
    }

    pub fn stream(&self, channel: Channel) -> Option<&StreamPlan> {
        self.streams.iter().find(|s| s.channel == channel)
    }

    /// Checks structure and that totals match `latents` and `codes`.
    pub fn validate(&self, latents: usize, codes: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.streams.is_empty() {
            return err("capacity plan has no streams".into());
        }
        if self.is_multi_stream() {
            for id in StreamId::ALL {
                if self.streams.iter().filter(|s| s.channel == Channel::Stream(id)).count() != 1 {
                    return err(format!("multi-stream plan must list {id} exactly once"));
                }
            }
            if self.streams.len() != StreamId::ALL.len() {
                return err("multi-stream plan must not mix ALL with streams".into());
            }
            for (a, b) in [(StreamId::Rh, StreamId::Lh), (StreamId::Movr, StreamId::Movl)] {
                let ba = &self.stream(Channel::Stream(a)).expect("checked").book;
                let bb = &self.stream(Channel::Stream(b)).expect("checked").book;
                if ba != bb {
                    return err(format!("{a} and {b} must share one codebook"));
                }
            }
        } else if self.streams.len() != 1 {
            return err("single-stream plan must have exactly one ALL stream".into());
        }
        for (i, b) in self.books.iter().enumerate() {
            if b.size == 0 || self.books[..i].iter().any(|o| o.name == b.name) {
                return err(format!("codebook `{}` is empty or listed twice", b.name));
            }
            if !self.streams.iter().any(|s| s.book == b.name) {
                return err(format!("codebook `{}` is not used by any stream", b.name));
            }
        }
        for s in &self.streams {
            if s.latents == 0 {
                return err(format!("stream {} has no latents", s.channel));
            }
            if self.book_index(&s.book).is_none() {
                return err(format!("stream {} names unknown codebook `{}`", s.channel, s.book));
            }
        }
        if self.total_latents() != latents {
            return err(format!("plan latents sum to {}, expected {latents}", self.total_latents()));
        }
        if self.total_codes() != codes {
            return err(format!("plan codebook sizes sum to {}, expected {codes}", self.total_codes()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PssConfig {
    pub p_force: f64,
    /// Weight of the cross-entropy that pulls a forced row's soft code
    /// assignment onto its designated code.
    pub classification_weight: f64,
}

impl Default for PssConfig {
    fn default() -> Self {
        PssConfig {
            p_force: 0.5,
            classification_weight: 1.0,
        }
    }
}

impl PssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_force) {
            return Err(Error::Config(format!("p_force {} outside [0, 1]", self.p_force)));
        }
        if !(self.classification_weight >= 0.0) {
            return Err(Error::Config("classification_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One (feature, channel) pairing: which latent slot of the channel is
/// forced, and which code range of the channel's book encodes the classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub feature: Feature,
    pub channel: Channel,
    pub slot: usize,
    pub book: String,
    pub codes: Range<usize>,
}

/// Deterministic feature-to-slot map. Features are taken in name order;
/// reserved ranges are packed from index 0 of each book; within a channel
/// the features take slots 0, 1, ... round-robin. On the single-stream plan
/// every feature is hosted by the ALL channel.
pub fn assign_feature_slots(plan: &CapacityPlan, schema: &PhonoFeatureSchema, features: &[Feature]) -> Result<Vec<FeatureSlot>> {
    let mut sorted = features.to_vec();
    sorted.sort_by_key(|f| f.name());
    sorted.dedup();
    let mut next_code: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next_slot: BTreeMap<Channel, usize> = BTreeMap::new();
    let mut book_ranges: BTreeMap<(&str, Feature), Range<usize>> = BTreeMap::new();
    let mut out = Vec::new();
    for f in sorted {
        let channels: Vec<&StreamPlan> = if plan.is_multi_stream() {
            let streams = schema.streams(f);
            plan.streams.iter().filter(|s| matches!(s.channel, Channel::Stream(id) if streams.contains(&id))).collect()
        } else {
            plan.streams.iter().collect()
        };
        for sp in channels {
            let book = plan.book_index(&sp.book).expect("validated plan");
            let size = plan.books[book].size;
            let range = match book_ranges.get(&(sp.book.as_str(), f)) {
                Some(r) => r.clone(),
                None => {
                    let start = *next_code.get(sp.book.as_str()).unwrap_or(&0);
                    let end = start + schema.classes(f);
                    if end > size {
                        return Err(Error::Capacity(format!(
                            "codebook `{}` ({size} codes) cannot reserve {} codes for {f}",
                            sp.book,
                            schema.classes(f)
                        )));
                    }
                    next_code.insert(sp.book.as_str(), end);
                    book_ranges.insert((sp.book.as_str(), f), start..end);
                    start..end
                }
            };
            let slot_counter = next_slot.entry(sp.channel).or_insert(0);
            let slot = *slot_counter % sp.latents;
            *slot_counter += 1;
            out.push(FeatureSlot {
                feature: f,
                channel: sp.channel,
                slot,
                book: sp.book.clone(),
                codes: range,
            });
        }
    }
    Ok(out)
}

impl PartialOrd for Channel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Channel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |c: &Channel| match c {
            Channel::All => 0,
            Channel::Stream(s) => 1 + s.index(),
        };
        key(self).cmp(&key(other))
    }
}

/// Overwrites the indices of `designated` rows `(row, code)` with
/// probability `p_force` each, then recomputes `Z_q` and the VQ losses
/// against the resulting codes.
pub fn pss_force<R: Rng>(
    outcome: &QuantizeOutcome,
    z: &Mat,
    book: &Codebook,
    designated: &[(usize, usize)],
    p_force: f64,
    rng: &mut R,
) -> Result<QuantizeOutcome> {
    if !(0.0..=1.0).contains(&p_force) {
        return Err(invalid(format!("p_force {p_force} outside [0, 1]")));
    }
    let mut out = outcome.clone();
    for &(row, code) in designated {
        if code >= book.size() {
            return Err(Error::Config(format!("forced code {code} outside codebook `{}`", book.name)));
        }
        if row >= out.indices.len() {
            return Err(shape(format!("designated row {row} outside {} rows", out.indices.len())));
        }
        if p_force > 0.0 && rng.random::<f64>() < p_force {
            out.indices[row] = code;
            out.forced_mask[row] = true;
        }
    }
    if out.forced_mask.iter().any(|&m| m) {
        out.refresh(z, book);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dimensions of the single-stream model. Multi-stream models use the
    /// same depth and heads, with a width chosen to match its parameter count.
    pub encoder: EncoderConfig,
    pub codebook_size: usize,
    pub sample_frames: usize,
    pub plan: CapacityPlan,
    pub pss: PssConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            codebook_size: 200,
            sample_frames: 16,
            plan: CapacityPlan::default(),
            pss: PssConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn plan_for(&self, variant: ModelVariant) -> CapacityPlan {
        if variant.multi_stream() {
            self.plan.clone()
        } else {
            CapacityPlan::single(self.encoder.latent_count, self.codebook_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pss.validate()?;
        if self.sample_frames < 2 {
            return Err(Error::Config("sample_frames must be at least 2".into()));
        }
        self.plan.validate(self.encoder.latent_count, self.codebook_size)
    }
}

/// Weights of the commitment and diversity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 3e-6, gamma: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Indices and operands of one book's quantization, held fixed so the loss
/// becomes a smooth function of the weights (finite-difference oracle).
#[derive(Debug, Clone)]
pub struct FrozenBook {
    pub indices: Vec<usize>,
    pub z_e: Mat,
    pub z_q: Mat,
    pub forced: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Sample codes by Gumbel-max at this temperature (training only).
    pub gumbel_temperature: Option<f64>,
    pub weights: LossWeights,
    pub frozen: Option<&'a [FrozenBook]>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            gumbel_temperature: None,
            weights: LossWeights::default(),
            frozen: None,
        }
    }

    pub fn train(gumbel_temperature: Option<f64>, weights: LossWeights) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            gumbel_temperature,
            weights,
            frozen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub recon: Vec<f64>,
    pub codebook: Vec<f64>,
    pub commit: Vec<f64>,
    pub diversity: Vec<f64>,
    /// Forced-code cross-entropy per book, zero where nothing was forced.
    pub classification: Vec<f64>,
    pub weights: LossWeights,
    pub classification_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Total recomputed from the components.
    pub fn recombine(&self) -> f64 {
        let r: f64 = self.recon.iter().sum();
        let v: f64 = (0..self.codebook.len())
            .map(|b| {
                self.codebook[b]
                    + self.weights.beta * self.commit[b]
                    + self.weights.gamma * self.diversity[b]
                    + self.classification_weight * self.classification[b]
            })
            .sum();
        r + v
    }

    pub fn recon_total(&self) -> f64 {
        self.recon.iter().sum()
    }
}

/// Result of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutcome {
    /// Packed reconstructions per channel, in plan order.
    pub reconstructions: Vec<Mat>,
    /// Sum of squared errors and element count per channel.
    pub squared_error: Vec<(f64, usize)>,
    /// Quantization of each book; rows are channel-major, then sample, then slot.
    pub quantized: Vec<QuantizeOutcome>,
    /// Encoder outputs fed to each book, same row order.
    pub encoder_outputs: Vec<Mat>,
    pub losses: LossBreakdown,
}

/// One record turned into per-channel frame matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub inputs: Vec<Mat>,
    pub labels: Option<PhonoLabels>,
    pub gloss_id: usize,
}

#[derive(Debug, Clone)]
struct StreamModule {
    plan: StreamPlan,
    book: usize,
    encoder: Encoder,
    decoder: Decoder,
}

/// A built model: weights, codebooks and the structure tying them together.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub schema: PhonoFeatureSchema,
    pub plan: CapacityPlan,
    pub params: ParamStore,
    pub books: Vec<Codebook>,
    pub slots: Vec<FeatureSlot>,
    layout: SkeletonLayout,
    streams: Vec<StreamModule>,
}

fn stream_features(id: StreamId, layout: &SkeletonLayout) -> usize {
    3 * match id {
        StreamId::Rh => layout.right_hand.len(),
        StreamId::Lh => layout.left_hand.len(),
        StreamId::Nmm => layout.face.len(),
        StreamId::Body => layout.body.len(),
        StreamId::Movr | StreamId::Movl => 1,
    }
}

fn channel_width(channel: Channel, layout: &SkeletonLayout) -> usize {
    match channel {
        Channel::All => 3 * layout.joint_count(),
        Channel::Stream(id) => stream_features(id, layout),
    }
}

fn pair_params(features: usize, cfg: &EncoderConfig) -> usize {
    Encoder::param_count(features, cfg) + Decoder::param_count(features, cfg)
}

/// Per-channel encoder configurations. Multi-stream widths start from the
/// shared multiple of `heads` whose total parameter count is closest to the
/// single-stream model's, then individual streams move one `heads` step at
/// a time while that brings the total closer.
pub fn stream_configs(plan: &CapacityPlan, base: &EncoderConfig, layout: &SkeletonLayout) -> Vec<EncoderConfig> {
    let with = |d: usize, latents: usize| EncoderConfig {
        model_dim: d,
        latent_count: latents,
        ..base.clone()
    };
    if !plan.is_multi_stream() {
        return plan.streams.iter().map(|s| with(base.model_dim, s.latents)).collect();
    }
    let target = pair_params(3 * layout.joint_count(), base) as i64;
    let gap = |widths: &[usize]| -> i64 {
        let total: i64 = plan
            .streams
            .iter()
            .zip(widths)
            .map(|(s, &d)| pair_params(channel_width(s.channel, layout), &with(d, s.latents)) as i64)
            .sum();
        (total - target).abs()
    };
    let n = plan.streams.len();
    let best = (1..=4 * base.model_dim / base.heads)
        .map(|m| m * base.heads)
        .min_by_key(|&d| gap(&vec![d; n]))
        .unwrap_or(base.model_dim);
    let mut widths = vec![best; n];
    let mut current = gap(&widths);
    loop {
        let mut improved = false;
        for i in 0..n {
            for d in [widths[i] + base.heads, widths[i].saturating_sub(base.heads)] {
                if d == 0 {
                    continue;
                }
                let mut trial = widths.clone();
                trial[i] = d;
                let g = gap(&trial);
                if g < current {
                    (widths, current, improved) = (trial, g, true);
                }
            }
        }
        if !improved {
            break;
        }
    }
    plan.streams.iter().zip(widths).map(|(s, d)| with(d, s.latents)).collect()
}

/// Builds a model. PSS variants take their settings from `cfg.pss`.
pub fn build_model(variant: ModelVariant, cfg: &ModelConfig, schema: &PhonoFeatureSchema, seed: u64) -> Result<Model> {
    cfg.validate()?;
    schema.validate()?;
    let plan = cfg.plan_for(variant);
    plan.validate(cfg.encoder.latent_count, cfg.codebook_size)?;
    if plan.is_multi_stream() != variant.multi_stream() {
        return Err(Error::Config(format!("variant {variant} does not match the plan's stream layout")));
    }
    let layout = SkeletonLayout::default();
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut books: Vec<Codebook> = plan
        .books
        .iter()
        .map(|b| Codebook::new(b.name.clone(), b.size, cfg.encoder.latent_dim, &mut rng))
        .collect();
    let configs = stream_configs(&plan, &cfg.encoder, &layout);
    let mut streams = Vec::new();
    for (sp, ecfg) in plan.streams.iter().zip(&configs) {
        let width = channel_width(sp.channel, &layout);
        let name = sp.channel.as_str().to_lowercase();
        let encoder = Encoder::new(&mut params, &format!("{name}.enc"), width, ecfg, &mut rng);
        let decoder = Decoder::new(&mut params, &format!("{name}.dec"), width, ecfg, &mut rng);
        let book = plan.book_index(&sp.book).expect("validated plan");
        books[book].channels.push(sp.channel.to_string());
        streams.push(StreamModule {
            plan: sp.clone(),
            book,
            encoder,
            decoder,
        });
    }
    let slots = if variant.supervised() {
        assign_feature_slots(&plan, schema, &Feature::ALL)?
    } else {
        Vec::new()
    };
    for fs in &slots {
        let b = plan.book_index(&fs.book).expect("validated plan");
        if books[b].reserved_for(fs.feature.name()).is_none() {
            books[b].reserve(fs.feature.name(), fs.codes.clone())?;
        }
    }
    Ok(Model {
        variant,
        config: cfg.clone(),
        schema: schema.clone(),
        plan,
        params,
        books,
        slots,
        layout,
        streams,
    })
}

impl Model {
    pub fn channels(&self) -> Vec<Channel> {
        self.streams.iter().map(|s| s.plan.channel).collect()
    }

    pub fn stream_config(&self, channel: Channel) -> Option<&EncoderConfig> {
        self.streams.iter().find(|s| s.plan.channel == channel).map(|s| s.encoder.config())
    }

    /// Index of the book quantizing `channel`.
    pub fn book_of(&self, channel: Channel) -> Option<usize> {
        self.streams.iter().find(|s| s.plan.channel == channel).map(|s| s.book)
    }

    /// Trainable scalars, codebooks included.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count() + self.books.iter().map(|b| b.entries.len()).sum::<usize>()
    }

    /// Width of the flattened code vector, `sum N_p,s * L_c`.
    pub fn bottleneck(&self) -> usize {
        self.plan.total_latents() * self.config.encoder.latent_dim
    }

    /// Zeroes every decoder's output projection.
    pub fn zero_output_heads(&mut self) {
        for s in &self.streams {
            s.decoder.zero_output_head(&mut self.params);
        }
    }

    pub fn prepare(&self, record: &SignRecord, with_labels: bool) -> Result<Prepared> {
        let inputs = if self.plan.is_multi_stream() {
            let bundle = partition_pose(&record.pose, &self.layout, self.config.sample_frames)?;
            self.streams
                .iter()
                .map(|s| match s.plan.channel {
                    Channel::Stream(id) => flatten_stream(bundle.get(id)),
                    Channel::All => unreachable!("multi-stream plan"),
                })
                .collect()
        } else {
            if record.pose.joint_count() != self.layout.joint_count() {
                return Err(shape(format!(
                    "pose has {} keypoints, layout expects {}",
                    record.pose.joint_count(),
                    self.layout.joint_count()
                )));
            }
            vec![record.pose.flatten()]
        };
        Ok(Prepared {
            inputs,
            labels: with_labels.then_some(record.labels),
            gloss_id: record.gloss_id,
        })
    }

    /// Rows `(row, code)` of each book's assignment designated for forcing.
    fn designated_rows(&self, batch: &[&Prepared]) -> Result<Vec<Vec<(usize, usize)>>> {
        let mut out = vec![Vec::new(); self.books.len()];
        if self.slots.is_empty() {
            return Ok(out);
        }
        let offsets = self.book_row_offsets(batch.len());
        for fs in &self.slots {
            let (si, sm) = self
                .streams
                .iter()
                .enumerate()
                .find(|(_, s)| s.plan.channel == fs.channel)
                .expect("slot channel exists");
            for (i, p) in batch.iter().enumerate() {
                let labels = p
                    .labels
                    .ok_or_else(|| invalid("phonological labels are required to train a supervised variant"))?;
                let class = labels.get(fs.feature);
                if class >= fs.codes.len() {
                    return Err(Error::Config(format!("{} class {class} outside its reserved range", fs.feature)));
                }
                let row = offsets[si] + i * sm.plan.latents + fs.slot;
                out[sm.book].push((row, fs.codes.start + class));
            }
        }
        Ok(out)
    }

    /// First row of each channel inside its book's stacked assignment.
    fn book_row_offsets(&self, batch: usize) -> Vec<usize> {
        let mut next = vec![0; self.books.len()];
        self.streams
            .iter()
            .map(|s| {
                let o = next[s.book];
                next[s.book] += batch * s.plan.latents;
                o
            })
            .collect()
    }

    /// Binds weights and codebooks to `tape`. Codebook `b` gets slot
    /// `params.len() + b`.
    pub fn bind(&self, tape: &mut Tape) -> (Bound, Vec<Var>) {
        let bound = self.params.bind(tape, 0);
        let base = self.params.len();
        let books = self
            .books
            .iter()
            .enumerate()
            .map(|(b, book)| tape.leaf(book.entries.clone(), base + b))
            .collect();
        (bound, books)
    }

    /// Builds the full loss graph on `tape`. Returns the scalar loss node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&Prepared],
        opts: &ForwardOptions,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<(Var, ForwardOutcome)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for p in batch {
            if p.inputs.len() != self.streams.len() {
                return Err(shape("prepared record does not match the model's channels"));
            }
        }
        let train = opts.mode == Mode::Train;
        if train && rng.is_none() {
            return Err(invalid("training mode needs a random source"));
        }
        let (bound, book_vars) = self.bind(tape);

        let mut z_vars = Vec::with_capacity(self.streams.len());
        let mut batches = Vec::with_capacity(self.streams.len());
        for (si, s) in self.streams.iter().enumerate() {
            let mats: Vec<&Mat> = batch.iter().map(|p| &p.inputs[si]).collect();
            let sb = SeqBatch::from_sequences(&mats)?;
            let drop = if train { rng.as_deref_mut() } else { None };
            z_vars.push(s.encoder.forward(tape, &bound, &sb, drop)?);
            batches.push(sb);
        }

        let designated = if train { self.designated_rows(batch)? } else { vec![Vec::new(); self.books.len()] };
        let offsets = self.book_row_offsets(batch.len());
        let mut quantized = Vec::with_capacity(self.books.len());
        let mut encoder_outputs = Vec::with_capacity(self.books.len());
        let mut decoder_inputs: Vec<Option<Var>> = vec![None; self.streams.len()];
        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        let mut diversity_terms = Vec::new();
        let mut class_terms: Vec<Option<Var>> = Vec::new();
        for (b, book) in self.books.iter().enumerate() {
            let members: Vec<usize> = (0..self.streams.len()).filter(|&s| self.streams[s].book == b).collect();
            let parts: Vec<Var> = members.iter().map(|&s| z_vars[s]).collect();
            let z = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
            let z_val = tape.value(z).clone();
            if z_val.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("encoder output ({})", book.name),
                    step: 0,
                });
            }

            let (mut outcome, noise, tau) = match (opts.frozen, opts.gumbel_temperature, train) {
                (Some(frozen), _, _) => {
                    let f = &frozen[b];
                    let mut o = assign_nearest(&f.z_e, book)?;
                    o.indices = f.indices.clone();
                    o.refresh(&f.z_e, book);
                    (o, None, DIVERSITY_TEMPERATURE)
                }
                (None, Some(tau), true) => {
                    let r = rng.as_deref_mut().expect("checked above");
                    let (o, g) = assign_gumbel(&z_val, book, tau, r)?;
                    (o, Some(g * tau), tau)
                }
                _ => (assign_nearest(&z_val, book)?, None, DIVERSITY_TEMPERATURE),
            };
            if train && opts.frozen.is_none() && !designated[b].is_empty() {
                let r = rng.as_deref_mut().expect("checked above");
                let p_force = self.config.pss.p_force;
                outcome = pss_force(&outcome, &z_val, book, &designated[b], p_force, r)?;
            }

            let zq = tape.gather_rows(book_vars[b], outcome.indices.clone());
            let (codebook_loss, commit_loss, dec_in) = match opts.frozen {
                Some(frozen) => {
                    let f = &frozen[b];
                    let ze0 = tape.constant(f.z_e.clone());
                    let cb = tape.mean_sq_diff(ze0, zq);
                    let zq0 = tape.constant(f.z_q.clone());
                    let cm = tape.mean_sq_diff(z, zq0);
                    let shift = tape.constant(&f.z_q - &f.z_e);
                    (cb, cm, tape.add(z, shift))
                }
                None => {
                    let ze_sg = tape.detach(z);
                    let cb = tape.mean_sq_diff(ze_sg, zq);
                    let zq_sg = tape.constant(outcome.quantized.clone());
                    let cm = tape.mean_sq_diff(z, zq_sg);
                    (cb, cm, tape.straight_through(z, outcome.quantized.clone()))
                }
            };
            let div = tape.diversity(z, book_vars[b], tau, noise.as_ref());
            outcome.loss_diversity = tape.scalar_value(div);
            let forced = match opts.frozen {
                Some(frozen) => &frozen[b].forced,
                None => &outcome.forced_mask,
            };
            let rows: Vec<usize> = (0..forced.len()).filter(|&r| forced[r]).collect();
            class_terms.push(if rows.is_empty() {
                None
            } else {
                let targets = rows.iter().map(|&r| outcome.indices[r]).collect();
                let zr = tape.gather_rows(z, rows);
                let logits = tape.neg_sq_distances(zr, book_vars[b]);
                let logits = tape.scale(logits, 1.0 / tau);
                Some(tape.cross_entropy(logits, targets))
            });
            codebook_terms.push(codebook_loss);
            commit_terms.push(commit_loss);
            diversity_terms.push(div);
            for &s in &members {
                let rows = offsets[s]..offsets[s] + batch.len() * self.streams[s].plan.latents;
                decoder_inputs[s] = Some(tape.slice_rows(dec_in, rows));
            }
            quantized.push(outcome);
            encoder_outputs.push(z_val);
        }

        let mut recon_terms = Vec::with_capacity(self.streams.len());
        let mut reconstructions = Vec::with_capacity(self.streams.len());
        let mut squared_error = Vec::with_capacity(self.streams.len());
        for (si, s) in self.streams.iter().enumerate() {
            let drop = if train { rng.as_deref_mut() } else { None };
            let dec_in = decoder_inputs[si].expect("every stream has a book");
            let x_hat = s.decoder.forward(tape, &bound, dec_in, &batches[si].lengths, drop)?;
            let target = tape.constant(batches[si].data.clone());
            let l = tape.mean_sq_diff(x_hat, target);
            let n = batches[si].data.len();
            squared_error.push((tape.scalar_value(l) * n as f64, n));
            reconstructions.push(tape.value(x_hat).clone());
            recon_terms.push(l);
        }

        let w = opts.weights;
        let mut terms: Vec<(Var, f64)> = recon_terms.iter().map(|&v| (v, 1.0)).collect();
        for b in 0..self.books.len() {
            terms.push((codebook_terms[b], 1.0));
            terms.push((commit_terms[b], w.beta));
            terms.push((diversity_terms[b], w.gamma));
            if let Some(c) = class_terms[b] {
                terms.push((c, self.config.pss.classification_weight));
            }
        }
        let loss = tape.weighted_sum(&terms);
        let values = |vs: &[Var], tape: &Tape| vs.iter().map(|&v| tape.scalar_value(v)).collect::<Vec<_>>();
        let losses = LossBreakdown {
            recon: values(&recon_terms, tape),
            codebook: values(&codebook_terms, tape),
            commit: values(&commit_terms, tape),
            diversity: values(&diversity_terms, tape),
            classification: class_terms.iter().map(|c| c.map_or(0.0, |v| tape.scalar_value(v))).collect(),
            weights: w,
            classification_weight: self.config.pss.classification_weight,
            total: tape.scalar_value(loss),
        };
        for (q, (cb, cm)) in quantized.iter_mut().zip(losses.codebook.iter().zip(&losses.commit)) {
            q.loss_codebook = *cb;
            q.loss_commit = *cm;
        }
        Ok((
            loss,
            ForwardOutcome {
                reconstructions,
                squared_error,
                quantized,
                encoder_outputs,
                losses,
            },
        ))
    }

    /// Forward pass without gradients.
    pub fn forward(&self, batch: &[&Prepared], opts: &ForwardOptions, rng: Option<&mut ModelRng>) -> Result<ForwardOutcome> {
        let mut tape = Tape::new();
        Ok(self.forward_on_tape(&mut tape, batch, opts, rng)?.1)
    }

    /// Forward and backward pass. Gradient slots follow [`Model::bind`].
    pub fn gradients(
        &self,
        batch: &[&Prepared],
        opts: &ForwardOptions,
        rng: Option<&mut ModelRng>,
    ) -> Result<(ForwardOutcome, Gradients)> {
        let mut tape = Tape::new();
        let (loss, out) = self.forward_on_tape(&mut tape, batch, opts, rng)?;
        Ok((out, tape.backward(loss)))
    }

    /// Eval-mode hard code indices per record, channel-major then slot.
    pub fn code_indices(&self, batch: &[&Prepared]) -> Result<Vec<Vec<(usize, usize)>>> {
        let out = self.forward(batch, &ForwardOptions::eval(), None)?;
        let offsets = self.book_row_offsets(batch.len());
        Ok((0..batch.len())
            .map(|i| {
                self.streams
                    .iter()
                    .enumerate()
                    .flat_map(|(si, s)| {
                        let start = offsets[si] + i * s.plan.latents;
                        (start..start + s.plan.latents).map(move |r| (s.book, r))
                    })
                    .map(|(b, r)| (b, out.quantized[b].indices[r]))
                    .collect()
            })
            .collect())
    }

    /// Flattened eval-mode `Z_q` per record, `bottleneck()` wide.
    pub fn code_vectors(&self, batch: &[&Prepared]) -> Result<Vec<Vec<f64>>> {
        let codes = self.code_indices(batch)?;
        Ok(codes
            .iter()
            .map(|c| {
                c.iter()
                    .flat_map(|&(b, k)| self.books[b].entries.row(k).to_vec())
                    .collect()
            })
            .collect())
    }

    /// Eval-mode hard index of each feature's designated slot, one entry per
    /// `self.slots` item.
    pub fn designated_indices(&self, prepared: &Prepared) -> Result<Vec<usize>> {
        let codes = self.code_indices(&[prepared])?;
        let mut starts = Vec::with_capacity(self.streams.len());
        let mut acc = 0;
        for s in &self.streams {
            starts.push(acc);
            acc += s.plan.latents;
        }
        Ok(self
            .slots
            .iter()
            .map(|fs| {
                let si = self.streams.iter().position(|s| s.plan.channel == fs.channel).expect("slot channel exists");
                codes[0][starts[si] + fs.slot].1
            })
            .collect())
    }

    /// Mutable access to all trainable tensors in slot order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self.params.values_mut().collect();
        v.extend(self.books.iter_mut().map(|b| &mut b.entries));
        v
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.params
            .iter()
            .map(|(_, m)| m.dim())
            .chain(self.books.iter().map(|b| b.entries.dim()))
            .collect()
    }

    /// Reconstruction of one record in eval mode, per channel, unpacked.
    pub fn reconstruct(&self, prepared: &Prepared) -> Result<Vec<Mat>> {
        let out = self.forward(&[prepared], &ForwardOptions::eval(), None)?;
        Ok(out.reconstructions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                model_dim: 16,
                layers: 1,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn records(n: usize) -> Vec<SignRecord> {
        let cfg = CorpusConfig {
            signs: n,
            instances_per_sign: 1,
            ..Default::default()
        };
        generate_corpus(&PhonoFeatureSchema::default(), &cfg).unwrap().0
    }

    #[test]
    fn variant_structure() {
        let schema = PhonoFeatureSchema::default();
        let cfg = small_cfg();
        let base = build_model(ModelVariant::Baseline, &cfg, &schema, 0).unwrap();
        assert_eq!(base.books.len(), 1);
        assert_eq!(base.books[0].size(), 200);
        assert_eq!(base.plan.total_latents(), 30);
        let full = build_model(ModelVariant::Full, &cfg, &schema, 0).unwrap();
        assert_eq!(full.books.len(), 4);
        assert_eq!(full.book_of(Channel::Stream(StreamId::Rh)), full.book_of(Channel::Stream(StreamId::Lh)));
        assert_eq!(full.book_of(Channel::Stream(StreamId::Movr)), full.book_of(Channel::Stream(StreamId::Movl)));
        for v in ModelVariant::ALL {
            let m = build_model(v, &cfg, &schema, 0).unwrap();
            assert_eq!(m.bottleneck(), 960);
        }
    }

    #[test]
    fn default_slot_map() {
        let schema = PhonoFeatureSchema::default();
        let plan = CapacityPlan::default();
        let slots = assign_feature_slots(&plan, &schema, &Feature::ALL).unwrap();
        let hand_end = slots.iter().filter(|s| s.book == "hand").map(|s| s.codes.end).max().unwrap();
        assert_eq!(hand_end, 22);
        assert_eq!(slots, assign_feature_slots(&plan, &schema, &Feature::ALL).unwrap());
        assert!(assign_feature_slots(&plan, &schema, &[]).unwrap().is_empty());
        let rh: Vec<_> = slots.iter().filter(|s| s.channel == Channel::Stream(StreamId::Rh)).collect();
        let lh: Vec<_> = slots.iter().filter(|s| s.channel == Channel::Stream(StreamId::Lh)).collect();
        assert_eq!(rh.len(), 6);
        for (a, b) in rh.iter().zip(&lh) {
            assert_eq!((a.feature, a.slot, &a.codes), (b.feature, b.slot, &b.codes));
        }
        let single = assign_feature_slots(&CapacityPlan::single(30, 200), &schema, &Feature::ALL).unwrap();
        let slots: Vec<usize> = single.iter().map(|s| s.slot).collect();
        assert_eq!(slots, (0..16).collect::<Vec<_>>());
        assert_eq!(single.last().unwrap().codes.end, 54);
    }

    #[test]
    fn capacity_errors() {
        let schema = PhonoFeatureSchema::default();
        let mut plan = CapacityPlan::default();
        plan.books[0].size = 20;
        plan.books[1].size = 100;
        assert!(matches!(assign_feature_slots(&plan, &schema, &Feature::ALL), Err(Error::Capacity(_))));
        let mut bad = CapacityPlan::default();
        bad.streams[1].book = "nmm".into();
        assert!(bad.validate(30, 200).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_label_free() {
        let schema = PhonoFeatureSchema::default();
        let recs = records(3);
        for v in ModelVariant::ALL {
            let m = build_model(v, &small_cfg(), &schema, 1).unwrap();
            let with: Vec<Prepared> = recs.iter().map(|r| m.prepare(r, true).unwrap()).collect();
            let without: Vec<Prepared> = recs.iter().map(|r| m.prepare(r, false).unwrap()).collect();
            let a = m.forward(&with.iter().collect::<Vec<_>>(), &ForwardOptions::eval(), None).unwrap();
            let b = m.forward(&without.iter().collect::<Vec<_>>(), &ForwardOptions::eval(), None).unwrap();
            assert_eq!(a.losses, b.losses);
            assert!((a.losses.total - a.losses.recombine()).abs() < 1e-9);
            let vecs = m.code_vectors(&[&with[0]]).unwrap();
            assert_eq!(vecs[0].len(), 960);
        }
    }

    #[test]
    fn supervised_training_requires_labels() {
        let schema = PhonoFeatureSchema::default();
        let recs = records(2);
        let m = build_model(ModelVariant::Pss, &small_cfg(), &schema, 1).unwrap();
        let p = m.prepare(&recs[0], false).unwrap();
        let mut rng = ModelRng::seed_from_u64(0);
        let opts = ForwardOptions::train(None, LossWeights::default());
        assert!(m.forward(&[&p], &opts, Some(&mut rng)).is_err());
    }

    #[test]
    fn zero_input_zero_head_gives_zero_recon() {
        let schema = PhonoFeatureSchema::default();
        let mut m = build_model(ModelVariant::Full, &small_cfg(), &schema, 2).unwrap();
        m.zero_output_heads();
        let mut rec = records(1).remove(0);
        rec.pose = crate::pose::PoseSequence::new(ndarray::Array3::zeros((20, 75, 3))).unwrap();
        let p = m.prepare(&rec, false).unwrap();
        let out = m.forward(&[&p], &ForwardOptions::eval(), None).unwrap();
        assert_eq!(out.losses.recon_total(), 0.0);
    }

    #[test]
    fn forcing_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let book = Codebook::new("b", 10, 4, &mut rng);
        let z = Mat::from_shape_simple_fn((10_000, 4), || rng.random_range(-1.0..1.0));
        let base = assign_nearest(&z, &book).unwrap();
        let designated: Vec<(usize, usize)> = (0..10_000).map(|r| (r, 9)).collect();
        let none = pss_force(&base, &z, &book, &designated, 0.0, &mut rng).unwrap();
        assert_eq!(none, base);
        let all = pss_force(&base, &z, &book, &designated, 1.0, &mut rng).unwrap();
        assert!(all.indices.iter().all(|&k| k == 9));
        assert_eq!(all.quantized.row(0), book.entries.row(9));
        let half = pss_force(&base, &z, &book, &designated, 0.5, &mut rng).unwrap();
        let frac = half.forced_mask.iter().filter(|&&m| m).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        assert!(pss_force(&base, &z, &book, &[(0, 10)], 1.0, &mut rng).is_err());
    }
}
