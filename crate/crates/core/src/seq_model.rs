//! Transformer encoder/decoder pair between frame sequences and a fixed
//! number of latent vectors.
//!
//! The encoder appends `latent_count` learned query tokens to the embedded
//! frames, runs pre-LN self-attention blocks over the joint sequence, and
//! projects the query positions down to `latent_dim`. The decoder turns one
//! sinusoidal query per output frame into a pose row by cross-attending over
//! the projected latents.

use std::rc::Rc;

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tape::{AttnLayout, Mat, Tape, Var};

/// Random source threaded through training-mode forward passes.
pub type ModelRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub latent_dim: usize,
    pub latent_count: usize,
    pub dropout: f64,
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 256,
            layers: 5,
            heads: 4,
            ff_mult: 2,
            latent_dim: 32,
            latent_count: 30,
            dropout: 0.2,
            max_frames: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.latent_count == 0 || self.latent_dim == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(crate::Error::Config("latent_count, latent_dim, layers and ff_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_mult
    }
}

/// `latent_count x latent_dim` latent matrix tagged with its channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub z: Mat,
    pub channel: String,
}

/// Variable-length sequences packed row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub data: Mat,
    pub lengths: Vec<usize>,
    /// Per-row validity; `false` rows are padding and are never attended to.
    pub valid: Option<Vec<bool>>,
}

impl SeqBatch {
    pub fn from_sequences(seqs: &[&Mat]) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(invalid("empty batch"));
        };
        let width = first.ncols();
        if seqs.iter().any(|m| m.ncols() != width) {
            return Err(shape("sequences in a batch must share their feature width"));
        }
        if seqs.iter().any(|m| m.nrows() == 0) {
            return Err(invalid("empty sequence"));
        }
        let views: Vec<_> = seqs.iter().map(|m| m.view()).collect();
        let data = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| shape(e.to_string()))?;
        Ok(SeqBatch {
            data,
            lengths: seqs.iter().map(|m| m.nrows()).collect(),
            valid: None,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect()
    }
}

/// Sinusoidal position table, `positions x dim`.
pub fn sinusoidal(positions: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((positions, dim), |(t, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = t as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d)
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mem: Var, heads: usize, layout: Rc<AttnLayout>) -> Var {
        let q = self.q.forward(tape, p, x);
        let k = self.k.forward(tape, p, mem);
        let v = self.v.forward(tape, p, mem);
        let a = tape.attention(q, k, v, heads, layout);
        self.o.forward(tape, p, a)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(tape, p, x);
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

fn residual(tape: &mut Tape, x: Var, update: Var, dropout: f64, rng: Option<&mut ModelRng>) -> Var {
    let update = match rng {
        Some(r) => tape.dropout(update, dropout, r),
        None => update,
    };
    tape.add(x, update)
}

#[derive(Debug, Clone)]
struct SelfBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct CrossBlock {
    ln_q: LayerNorm,
    ln_mem: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Frame sequence to `latent_count x latent_dim` latents.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    in_features: usize,
    input: Linear,
    queries: ParamId,
    blocks: Vec<SelfBlock>,
    ln_f: LayerNorm,
    out: Linear,
    pos: Mat,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_features: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let input = Linear::new(store, &format!("{name}.input"), in_features, d, rng);
        let queries = store.add(
            format!("{name}.queries"),
            Mat::from_shape_simple_fn((cfg.latent_count, d), || rng.random_range(-0.1..0.1)),
        );
        let blocks = (0..cfg.layers)
            .map(|l| SelfBlock {
                ln1: LayerNorm::new(store, &format!("{name}.block{l}.ln1"), d),
                attn: Attention::new(store, &format!("{name}.block{l}.attn"), d, rng),
                ln2: LayerNorm::new(store, &format!("{name}.block{l}.ln2"), d),
                ff: FeedForward::new(store, &format!("{name}.block{l}.ff"), d, cfg.ff_dim(), rng),
            })
            .collect();
        Encoder {
            in_features,
            input,
            queries,
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d),
            out: Linear::new(store, &format!("{name}.out"), d, cfg.latent_dim, rng),
            pos: sinusoidal(cfg.max_frames, d),
            cfg: cfg.clone(),
        }
    }

    /// Parameter count of an encoder with this shape, without building it.
    pub fn param_count(in_features: usize, cfg: &EncoderConfig) -> usize {
        let d = cfg.model_dim;
        let block = 2 * LayerNorm::param_count(d)
            + Attention::param_count(d)
            + Linear::param_count(d, cfg.ff_dim())
            + Linear::param_count(cfg.ff_dim(), d);
        Linear::param_count(in_features, d)
            + cfg.latent_count * d
            + cfg.layers * block
            + LayerNorm::param_count(d)
            + Linear::param_count(d, cfg.latent_dim)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    /// Packed latents, `batch.len() * latent_count` rows, sequence-major.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &SeqBatch, mut rng: Option<&mut ModelRng>) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        if batch.data.ncols() != self.in_features {
            return Err(shape(format!(
                "encoder expects {} features per frame, got {}",
                self.in_features,
                batch.data.ncols()
            )));
        }
        if let Some(&l) = batch.lengths.iter().find(|&&l| l == 0 || l > self.cfg.max_frames) {
            return Err(invalid(format!("sequence length {l} outside 1..={}", self.cfg.max_frames)));
        }
        let n_p = self.cfg.latent_count;
        let total_frames = batch.data.nrows();
        let d = self.cfg.model_dim;

        let mut pos = Mat::zeros((total_frames, d));
        let mut row = 0;
        for &l in &batch.lengths {
            pos.slice_mut(s![row..row + l, ..]).assign(&self.pos.slice(s![0..l, ..]));
            row += l;
        }
        let x = tape.constant(batch.data.clone());
        let h = self.input.forward(tape, p, x);
        let pos = tape.constant(pos);
        let h = tape.add(h, pos);
        let joined = tape.concat_rows(&[h, p.get(self.queries)]);

        let mut order = Vec::with_capacity(total_frames + n_p * batch.len());
        let mut token_lengths = Vec::with_capacity(batch.len());
        let mut query_rows = Vec::with_capacity(n_p * batch.len());
        let mut key_valid = batch.valid.as_ref().map(|_| Vec::with_capacity(order.capacity()));
        let mut frame = 0;
        for &l in &batch.lengths {
            let base = order.len();
            order.extend(frame..frame + l);
            order.extend(total_frames..total_frames + n_p);
            query_rows.extend(base + l..base + l + n_p);
            if let (Some(kv), Some(valid)) = (key_valid.as_mut(), batch.valid.as_ref()) {
                kv.extend_from_slice(&valid[frame..frame + l]);
                kv.extend(std::iter::repeat_n(true, n_p));
            }
            token_lengths.push(l + n_p);
            frame += l;
        }
        let mut x = tape.gather_rows(joined, order);
        let mut layout = AttnLayout::self_blocks(&token_lengths);
        layout.key_valid = key_valid;
        let layout = Rc::new(layout);
        for b in &self.blocks {
            let n = b.ln1.forward(tape, p, x);
            let a = b.attn.forward(tape, p, n, n, self.cfg.heads, layout.clone());
            x = residual(tape, x, a, self.cfg.dropout, rng.as_deref_mut());
            let n = b.ln2.forward(tape, p, x);
            let f = b.ff.forward(tape, p, n);
            x = residual(tape, x, f, self.cfg.dropout, rng.as_deref_mut());
        }
        let x = self.ln_f.forward(tape, p, x);
        let q = tape.gather_rows(x, query_rows);
        Ok(self.out.forward(tape, p, q))
    }

    /// Evaluation-mode encoding of one sequence. Rows at index `valid_len`
    /// and beyond are treated as padding.
    pub fn encode(&self, store: &ParamStore, frames: &Mat, valid_len: Option<usize>, channel: &str) -> Result<LatentBlock> {
        if frames.nrows() == 0 {
            return Err(invalid("cannot encode an empty sequence"));
        }
        let mut batch = SeqBatch::from_sequences(&[frames])?;
        if let Some(v) = valid_len {
            if v == 0 || v > frames.nrows() {
                return Err(invalid(format!("valid length {v} outside 1..={}", frames.nrows())));
            }
            batch.valid = Some((0..frames.nrows()).map(|i| i < v).collect());
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 0);
        let z = self.forward(&mut tape, &p, &batch, None)?;
        Ok(LatentBlock {
            z: tape.value(z).clone(),
            channel: channel.to_string(),
        })
    }
}

/// Latents to `out_frames x out_features` rows.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: EncoderConfig,
    out_features: usize,
    latent_in: Linear,
    slots: ParamId,
    query_bias: ParamId,
    blocks: Vec<CrossBlock>,
    ln_f: LayerNorm,
    out: Linear,
    pos: Mat,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, out_features: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let latent_in = Linear::new(store, &format!("{name}.latent_in"), cfg.latent_dim, d, rng);
        let slots = store.add(
            format!("{name}.slots"),
            Mat::from_shape_simple_fn((cfg.latent_count, d), || rng.random_range(-0.1..0.1)),
        );
        let query_bias = store.add(format!("{name}.query_bias"), Mat::zeros((1, d)));
        let blocks = (0..cfg.layers)
            .map(|l| CrossBlock {
                ln_q: LayerNorm::new(store, &format!("{name}.block{l}.ln_q"), d),
                ln_mem: LayerNorm::new(store, &format!("{name}.block{l}.ln_mem"), d),
                attn: Attention::new(store, &format!("{name}.block{l}.attn"), d, rng),
                ln2: LayerNorm::new(store, &format!("{name}.block{l}.ln2"), d),
                ff: FeedForward::new(store, &format!("{name}.block{l}.ff"), d, cfg.ff_dim(), rng),
            })
            .collect();
        Decoder {
            out_features,
            latent_in,
            slots,
            query_bias,
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d),
            out: Linear::new(store, &format!("{name}.out"), d, out_features, rng),
            pos: sinusoidal(cfg.max_frames, d),
            cfg: cfg.clone(),
        }
    }

    pub fn param_count(out_features: usize, cfg: &EncoderConfig) -> usize {
        let d = cfg.model_dim;
        let block = 3 * LayerNorm::param_count(d)
            + Attention::param_count(d)
            + Linear::param_count(d, cfg.ff_dim())
            + Linear::param_count(cfg.ff_dim(), d);
        Linear::param_count(cfg.latent_dim, d)
            + cfg.latent_count * d
            + d
            + cfg.layers * block
            + LayerNorm::param_count(d)
            + Linear::param_count(d, out_features)
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// Zeroes the output projection so every reconstruction starts at 0.
    pub fn zero_output_head(&self, store: &mut ParamStore) {
        store.value_mut(self.out.w).fill(0.0);
        store.value_mut(self.out.b).fill(0.0);
    }

    /// `latents` holds `out_lengths.len() * latent_count` rows; returns the
    /// packed reconstructions, `sum(out_lengths)` rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, latents: Var, out_lengths: &[usize], mut rng: Option<&mut ModelRng>) -> Result<Var> {
        let n_p = self.cfg.latent_count;
        let b = out_lengths.len();
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        let zr = tape.value(latents);
        if zr.nrows() != b * n_p || zr.ncols() != self.cfg.latent_dim {
            return Err(shape(format!(
                "decoder expects {} x {} latents, got {:?}",
                b * n_p,
                self.cfg.latent_dim,
                zr.dim()
            )));
        }
        if let Some(&l) = out_lengths.iter().find(|&&l| l == 0 || l > self.cfg.max_frames) {
            return Err(invalid(format!("output length {l} outside 1..={}", self.cfg.max_frames)));
        }
        let mem = self.latent_in.forward(tape, p, latents);
        let slot_rows: Vec<usize> = (0..b).flat_map(|_| 0..n_p).collect();
        let slots = tape.gather_rows(p.get(self.slots), slot_rows);
        let mem = tape.add(mem, slots);

        let total: usize = out_lengths.iter().sum();
        let mut pos = Mat::zeros((total, self.cfg.model_dim));
        let mut row = 0;
        for &l in out_lengths {
            pos.slice_mut(s![row..row + l, ..]).assign(&self.pos.slice(s![0..l, ..]));
            row += l;
        }
        let q = tape.constant(pos);
        let mut x = tape.add_row(q, p.get(self.query_bias));
        let layout = Rc::new(AttnLayout::cross_blocks(out_lengths, &vec![n_p; b]));
        for blk in &self.blocks {
            let nq = blk.ln_q.forward(tape, p, x);
            let nm = blk.ln_mem.forward(tape, p, mem);
            let a = blk.attn.forward(tape, p, nq, nm, self.cfg.heads, layout.clone());
            x = residual(tape, x, a, self.cfg.dropout, rng.as_deref_mut());
            let n = blk.ln2.forward(tape, p, x);
            let f = blk.ff.forward(tape, p, n);
            x = residual(tape, x, f, self.cfg.dropout, rng.as_deref_mut());
        }
        let x = self.ln_f.forward(tape, p, x);
        Ok(self.out.forward(tape, p, x))
    }

    /// Evaluation-mode decoding of one latent block.
    pub fn decode(&self, store: &ParamStore, latents: &LatentBlock, out_frames: usize, out_features: usize) -> Result<Mat> {
        if out_features != self.out_features {
            return Err(shape(format!(
                "decoder emits {} features, {} requested",
                self.out_features, out_features
            )));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 0);
        let z = tape.constant(latents.z.clone());
        let out = self.forward(&mut tape, &p, z, &[out_frames], None)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean over all elements of `(x - x_hat)^2`.
pub fn reconstruction_loss(x: &Mat, x_hat: &Mat) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(shape(format!("reconstruction shapes differ: {:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let n = x.len().max(1) as f64;
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            model_dim: 16,
            layers: 1,
            heads: 4,
            ff_mult: 2,
            latent_dim: 32,
            latent_count: 8,
            dropout: 0.2,
            max_frames: 64,
        }
    }

    fn random(rng: &mut ModelRng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut rng = ModelRng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 63, &small_cfg(), &mut rng);
        let x = random(&mut rng, 16, 63);
        let a = enc.encode(&store, &x, None, "RH").unwrap();
        let b = enc.encode(&store, &x, None, "RH").unwrap();
        assert_eq!(a.z.dim(), (8, 32));
        assert_eq!(a, b);
        assert_eq!(store.scalar_count(), Encoder::param_count(63, &small_cfg()));
    }

    #[test]
    fn frame_order_matters() {
        let mut rng = ModelRng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 6, &small_cfg(), &mut rng);
        let x = random(&mut rng, 12, 6);
        let rev = Mat::from_shape_fn((12, 6), |(t, c)| x[[11 - t, c]]);
        let a = enc.encode(&store, &x, None, "x").unwrap().z;
        let b = enc.encode(&store, &rev, None, "x").unwrap().z;
        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let cos = dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos < 1.0 - 1e-9, "cosine {cos}");
    }

    #[test]
    fn padding_is_ignored_under_mask() {
        let mut rng = ModelRng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 6, &small_cfg(), &mut rng);
        let x = random(&mut rng, 10, 6);
        let mut padded = Mat::zeros((14, 6));
        padded.slice_mut(s![0..10, ..]).assign(&x);
        padded.slice_mut(s![10.., ..]).fill(7.5);
        let a = enc.encode(&store, &x, None, "x").unwrap().z;
        let b = enc.encode(&store, &padded, Some(10), "x").unwrap().z;
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(enc.encode(&store, &Mat::zeros((0, 6)), None, "x").is_err());
    }

    #[test]
    fn decode_shape_determinism_and_sensitivity() {
        let mut rng = ModelRng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 3, &small_cfg(), &mut rng);
        assert_eq!(store.scalar_count(), Decoder::param_count(3, &small_cfg()));
        let lat = LatentBlock {
            z: random(&mut rng, 8, 32),
            channel: "MOVR".into(),
        };
        let a = dec.decode(&store, &lat, 40, 3).unwrap();
        assert_eq!(a.dim(), (40, 3));
        assert_eq!(a, dec.decode(&store, &lat, 40, 3).unwrap());
        let mut zeroed = lat.clone();
        zeroed.z.row_mut(3).fill(0.0);
        let b = dec.decode(&store, &zeroed, 40, 3).unwrap();
        assert!(reconstruction_loss(&a, &b).unwrap() > 0.0);
        assert!(dec.decode(&store, &lat, 40, 4).is_err());
    }

    #[test]
    fn reconstruction_loss_values() {
        let z = Mat::zeros((4, 3));
        assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&z, &Mat::ones((4, 3))).unwrap(), 1.0);
        assert!(reconstruction_loss(&z, &Mat::ones((3, 4))).is_err());
        let mut rng = ModelRng::seed_from_u64(5);
        let (a, b) = (random(&mut rng, 7, 5), random(&mut rng, 7, 5));
        let mut naive = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                naive += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((reconstruction_loss(&a, &b).unwrap() - naive / 35.0).abs() < 1e-12);
    }
}
