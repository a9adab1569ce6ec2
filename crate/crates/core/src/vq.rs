//! Codebooks and vector quantization.
//!
//! Nearest-code assignment, Gumbel-max exploratory assignment, the
//! straight-through gradient contract, the usage-entropy diversity term,
//! perplexity, and dead-code re-initialization.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tape::{softmax_rows, Mat, Tape, Var};

/// Temperature used for soft assignments when quantizing without Gumbel noise.
pub const DIVERSITY_TEMPERATURE: f64 = 1.0;

/// A contiguous block of code indices pre-assigned to one labeled feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedRange {
    pub feature: String,
    pub range: Range<usize>,
}

/// `K` code vectors of width `L_c` with usage counts since the last reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub name: String,
    #[serde(with = "crate::checkpoint::mat")]
    pub entries: Mat,
    pub usage: Vec<u64>,
    /// Total assignments recorded since the last usage reset.
    pub window_assignments: u64,
    /// Channels quantized against this book (e.g. `["RH", "LH"]`).
    pub channels: Vec<String>,
    pub reserved: Vec<ReservedRange>,
}

impl Codebook {
    /// Entries drawn uniformly from `[-1/K, 1/K]`.
    pub fn new<R: Rng>(name: impl Into<String>, size: usize, dim: usize, rng: &mut R) -> Self {
        assert!(size >= 1 && dim >= 1, "codebook needs at least one entry of width >= 1");
        let a = 1.0 / size as f64;
        let entries = Mat::from_shape_simple_fn((size, dim), || rng.random_range(-a..=a));
        Self::from_entries(name, entries)
    }

    pub fn from_entries(name: impl Into<String>, entries: Mat) -> Self {
        let k = entries.nrows();
        Codebook {
            name: name.into(),
            entries,
            usage: vec![0; k],
            window_assignments: 0,
            channels: Vec::new(),
            reserved: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
        self.window_assignments += indices.len() as u64;
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
        self.window_assignments = 0;
    }

    /// Adds a reserved range, rejecting overlaps and out-of-bounds ranges.
    pub fn reserve(&mut self, feature: impl Into<String>, range: Range<usize>) -> Result<()> {
        if range.end > self.size() || range.is_empty() {
            return Err(crate::Error::Capacity(format!(
                "reserved range {range:?} does not fit codebook `{}` of size {}",
                self.name,
                self.size()
            )));
        }
        if self.reserved.iter().any(|r| r.range.start < range.end && range.start < r.range.end) {
            return Err(crate::Error::Config(format!("reserved range {range:?} overlaps in `{}`", self.name)));
        }
        self.reserved.push(ReservedRange {
            feature: feature.into(),
            range,
        });
        Ok(())
    }

    pub fn reserved_for(&self, feature: &str) -> Option<&Range<usize>> {
        self.reserved.iter().find(|r| r.feature == feature).map(|r| &r.range)
    }

    /// Rows of the book selected by `indices`.
    pub fn lookup(&self, indices: &[usize]) -> Mat {
        let mut out = Mat::zeros((indices.len(), self.dim()));
        for (i, &k) in indices.iter().enumerate() {
            out.row_mut(i).assign(&self.entries.row(k));
        }
        out
    }

    fn check_input(&self, z: &Mat) -> Result<()> {
        if z.ncols() != self.dim() {
            return Err(shape(format!(
                "latent width {} does not match codebook width {}",
                z.ncols(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite latent vector"));
        }
        Ok(())
    }
}

/// Result of quantizing `N` latent vectors against one codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutcome {
    pub indices: Vec<usize>,
    pub quantized: Mat,
    pub loss_codebook: f64,
    pub loss_commit: f64,
    pub loss_diversity: f64,
    pub perplexity: f64,
    pub forced_mask: Vec<bool>,
}

impl QuantizeOutcome {
    /// Refreshes `quantized` and the codebook/commitment losses after indices
    /// were changed.
    pub fn refresh(&mut self, z: &Mat, book: &Codebook) {
        self.quantized = book.lookup(&self.indices);
        let l = mean_sq_diff(z, &self.quantized);
        self.loss_codebook = l;
        self.loss_commit = l;
        self.perplexity = usage_perplexity(&self.indices, book.size());
    }
}

/// Exponentially decaying Gumbel temperature, floored at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelSchedule {
    pub start_temperature: f64,
    pub end_temperature: f64,
    pub decay_steps: f64,
    pub current_step: u64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        GumbelSchedule {
            start_temperature: 1.0,
            end_temperature: 0.1,
            decay_steps: 1000.0,
            current_step: 0,
        }
    }
}

impl GumbelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.end_temperature > 0.0 && self.start_temperature >= self.end_temperature && self.decay_steps > 0.0) {
            return Err(crate::Error::Config(
                "gumbel schedule needs start >= end > 0 and positive decay".into(),
            ));
        }
        Ok(())
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        (self.start_temperature * (-(step as f64) / self.decay_steps).exp()).max(self.end_temperature)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature_at(self.current_step)
    }
}

fn mean_sq_diff(a: &Mat, b: &Mat) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Squared distances from each row of `z` to each code, computed directly as
/// `sum_l (z_l - c_l)^2`.
pub fn code_distances(z: &Mat, entries: &Mat) -> Mat {
    let (z, entries) = (z.as_standard_layout(), entries.as_standard_layout());
    let width = z.ncols();
    let (zs, cs) = (z.as_slice().expect("standard layout"), entries.as_slice().expect("standard layout"));
    let mut d = Mat::zeros((z.nrows(), entries.nrows()));
    if width == 0 {
        return d;
    }
    for (zr, out) in zs.chunks_exact(width).zip(d.as_slice_mut().expect("fresh array").chunks_exact_mut(entries.nrows())) {
        for (cr, o) in cs.chunks_exact(width).zip(out.iter_mut()) {
            *o = zr.iter().zip(cr).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    d
}

/// Row-wise argmin, ties to the lowest index.
fn argmin_rows(d: &Mat) -> Vec<usize> {
    d.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Nearest-code assignment without touching usage statistics.
pub fn assign_nearest(z: &Mat, book: &Codebook) -> Result<QuantizeOutcome> {
    book.check_input(z)?;
    let d = code_distances(z, &book.entries);
    let indices = argmin_rows(&d);
    let mut soft = d.mapv(|v| -v / DIVERSITY_TEMPERATURE);
    softmax_rows(&mut soft);
    Ok(build_outcome(z, book, indices, &soft))
}

/// Gumbel-max assignment: index `argmax_j(-d_ij / tau + g_ij)`, i.e. a draw
/// from `softmax(-d_i / tau)`. Usage statistics are not touched.
pub fn assign_gumbel<R: Rng>(z: &Mat, book: &Codebook, tau: f64, rng: &mut R) -> Result<(QuantizeOutcome, Mat)> {
    book.check_input(z)?;
    if !(tau > 0.0) {
        return Err(invalid("gumbel temperature must be positive"));
    }
    let d = code_distances(z, &book.entries);
    let noise = gumbel_noise(d.nrows(), d.ncols(), rng);
    let mut logits = &d.mapv(|v| -v / tau) + &noise;
    let indices = argmax_rows(&logits);
    softmax_rows(&mut logits);
    Ok((build_outcome(z, book, indices, &logits), noise))
}

fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Standard Gumbel samples `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

fn build_outcome(z: &Mat, book: &Codebook, indices: Vec<usize>, soft: &Mat) -> QuantizeOutcome {
    let n = indices.len();
    let mut out = QuantizeOutcome {
        quantized: Mat::zeros((0, 0)),
        loss_codebook: 0.0,
        loss_commit: 0.0,
        loss_diversity: soft_diversity(soft),
        perplexity: 1.0,
        forced_mask: vec![false; n],
        indices,
    };
    out.refresh(z, book);
    out
}

fn soft_diversity(soft: &Mat) -> f64 {
    let k = soft.ncols();
    if k <= 1 || soft.nrows() == 0 {
        return 0.0;
    }
    let n = soft.nrows() as f64;
    let h: f64 = soft
        .columns()
        .into_iter()
        .map(|c| c.sum() / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (1.0 - h / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Nearest-neighbour quantization (`k_i = argmin_j |z_i - c_j|^2`, lowest
/// index on ties). Increments the book's usage counts.
pub fn quantize_hard(z: &Mat, book: &mut Codebook) -> Result<QuantizeOutcome> {
    let out = assign_nearest(z, book)?;
    book.record_usage(&out.indices);
    Ok(out)
}

/// Gumbel-max quantization at the schedule's current temperature. The
/// quantized rows snap to the sampled entries. Increments usage counts.
pub fn quantize_gumbel<R: Rng>(z: &Mat, book: &mut Codebook, schedule: &GumbelSchedule, rng: &mut R) -> Result<QuantizeOutcome> {
    let (out, _) = assign_gumbel(z, book, schedule.temperature(), rng)?;
    book.record_usage(&out.indices);
    Ok(out)
}

/// Decoder input whose value is `quantized` and whose gradient flows to `z`
/// unchanged.
pub fn straight_through(tape: &mut Tape, z: Var, quantized: &Mat) -> Result<Var> {
    if tape.value(z).dim() != quantized.dim() {
        return Err(shape(format!(
            "straight-through operands differ: {:?} vs {:?}",
            tape.value(z).dim(),
            quantized.dim()
        )));
    }
    Ok(tape.straight_through(z, quantized.clone()))
}

/// `1 - H(p_mean) / ln K` for row-stochastic `soft` (`N x K`).
pub fn diversity_loss(soft: &Mat) -> Result<f64> {
    for (i, row) in soft.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(soft_diversity(soft))
}

/// `exp(H(h / sum h))`, in `[1, K]`.
pub fn perplexity(histogram: &[f64]) -> Result<f64> {
    let total: f64 = histogram.iter().sum();
    if histogram.iter().any(|&h| !(h >= 0.0)) || !(total > 0.0) {
        return Err(invalid("usage histogram must be non-negative with a positive sum"));
    }
    let h: f64 = histogram
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Perplexity of the assignment histogram of `indices` over `k` codes.
pub fn usage_perplexity(indices: &[usize], k: usize) -> f64 {
    let mut hist = vec![0.0; k];
    for &i in indices {
        hist[i] += 1.0;
    }
    perplexity(&hist).unwrap_or(1.0)
}

/// Usage threshold below which a code counts as dead:
/// `max(1, min_fraction * assignments / K)`, rounded up so that integer
/// counts compare identically.
pub fn dead_code_threshold(window_assignments: u64, k: usize, min_fraction: f64) -> u64 {
    let t = (min_fraction * window_assignments as f64 / k as f64).max(1.0);
    t.ceil() as u64
}

/// Replaces every code with `usage < threshold` by the mean of `sample_size`
/// distinct rows drawn from `encoder_sample`, resetting that code's usage.
/// Returns the number of codes replaced.
pub fn reinit_dead_codes<R: Rng>(
    book: &mut Codebook,
    encoder_sample: &Mat,
    threshold: u64,
    sample_size: usize,
    rng: &mut R,
) -> Result<usize> {
    if sample_size == 0 || encoder_sample.nrows() < sample_size {
        return Err(invalid(format!(
            "need at least {sample_size} encoder outputs, got {}",
            encoder_sample.nrows()
        )));
    }
    if encoder_sample.ncols() != book.dim() {
        return Err(shape("encoder sample width differs from codebook width"));
    }
    let mut replaced = 0;
    for j in 0..book.size() {
        if book.usage[j] >= threshold {
            continue;
        }
        let rows = sample(rng, encoder_sample.nrows(), sample_size);
        let mut mean = ndarray::Array1::<f64>::zeros(book.dim());
        for r in rows.iter() {
            mean += &encoder_sample.row(r);
        }
        mean /= sample_size as f64;
        book.entries.row_mut(j).assign(&mean);
        book.usage[j] = 0;
        replaced += 1;
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(entries: Mat) -> Codebook {
        Codebook::from_entries("test", entries)
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Codebook::new("b", 16, 4, &mut rng);
        let z = b.lookup(&[7]);
        let out = quantize_hard(&z, &mut b).unwrap();
        assert_eq!(out.indices, vec![7]);
        assert_eq!(out.loss_codebook, 0.0);
        assert_eq!(out.loss_commit, 0.0);
        assert_eq!(b.usage[7], 1);
    }

    #[test]
    fn geometry_and_tie_break() {
        let mut b = book(array![[0.0, 0.0], [1.0, 0.0]]);
        let z = array![[0.4, 0.0], [0.6, 0.0], [0.5, 0.0]];
        let out = quantize_hard(&z, &mut b).unwrap();
        assert_eq!(out.indices, vec![0, 1, 0]);
        assert_eq!(out.quantized.row(1), b.entries.row(1));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut b = book(array![[0.0, 0.0]]);
        assert!(matches!(quantize_hard(&array![[0.0, 0.0, 0.0]], &mut b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn hard_quantization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Codebook::new("b", 50, 8, &mut rng);
        let z = Mat::from_shape_simple_fn((40, 8), || rng.random_range(-0.05..0.05));
        let first = quantize_hard(&z, &mut b).unwrap();
        let second = quantize_hard(&first.quantized, &mut b).unwrap();
        assert_eq!(first.indices, second.indices);
    }

    #[test]
    fn gumbel_cold_limit_matches_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Codebook::new("b", 30, 6, &mut rng);
        let z = Mat::from_shape_simple_fn((100, 6), || rng.random_range(-0.1..0.1));
        let hard = assign_nearest(&z, &b).unwrap();
        let (cold, _) = assign_gumbel(&z, &b, 1e-6, &mut rng).unwrap();
        assert_eq!(hard.indices, cold.indices);
    }

    #[test]
    fn gumbel_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Codebook::new("b", 30, 6, &mut rng);
        let z = Mat::from_shape_simple_fn((50, 6), || rng.random_range(-0.1..0.1));
        let a = assign_gumbel(&z, &b, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let c = assign_gumbel(&z, &b, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(a.indices, c.indices);
    }

    #[test]
    fn gumbel_equal_distances_sample_evenly() {
        let b = book(array![[1.0, 0.0], [-1.0, 0.0]]);
        let z = Mat::zeros((10_000, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (out, _) = assign_gumbel(&z, &b, 5.0, &mut rng).unwrap();
        let ones = out.indices.iter().filter(|&&i| i == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.05, "frequency {ones}");
    }

    #[test]
    fn gumbel_schedule_is_monotone() {
        let s = GumbelSchedule::default();
        let temps: Vec<f64> = (0..10_000).step_by(100).map(|t| s.temperature_at(t)).collect();
        assert!(temps.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s.temperature_at(0), 1.0);
        assert_eq!(s.temperature_at(1_000_000), 0.1);
    }

    #[test]
    fn diversity_values() {
        assert_eq!(diversity_loss(&array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(), 1.0);
        assert!(diversity_loss(&Mat::from_elem((3, 4), 0.25)).unwrap().abs() < 1e-15);
        let half = diversity_loss(&array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((half - (1.0 - 2f64.ln() / 4f64.ln())).abs() < 1e-12);
        assert!((half - 0.5).abs() < 1e-12);
        assert!(diversity_loss(&array![[0.5, 0.4]]).is_err());
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(&[0.0, 5.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&vec![1.0; 200]).unwrap() - 200.0).abs() < 1e-9);
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let p = perplexity(&[3.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((p - h.exp()).abs() < 1e-12);
        assert!((p - 1.7548).abs() < 1e-4);
        assert!(perplexity(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn reinit_leaves_live_books_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = Codebook::new("b", 4, 3, &mut rng);
        b.usage = vec![5, 5, 5, 5];
        let before = b.clone();
        let sample_rows = Mat::zeros((10, 3));
        assert_eq!(reinit_dead_codes(&mut b, &sample_rows, 2, 8, &mut rng).unwrap(), 0);
        assert_eq!(b, before);
    }

    #[test]
    fn reinit_constant_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = Codebook::new("b", 4, 3, &mut rng);
        b.usage = vec![5, 0, 5, 5];
        let v = array![0.25, -1.5, 3.0];
        let mut sample_rows = Mat::zeros((10, 3));
        for mut r in sample_rows.rows_mut() {
            r.assign(&v);
        }
        assert_eq!(reinit_dead_codes(&mut b, &sample_rows, 1, 8, &mut rng).unwrap(), 1);
        assert_eq!(b.entries.row(1), v);
        assert_eq!(b.usage, vec![5, 0, 5, 5]);
        assert!(reinit_dead_codes(&mut b, &Mat::zeros((3, 3)), 1, 8, &mut rng).is_err());
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(dead_code_threshold(0, 200, 0.01), 1);
        assert_eq!(dead_code_threshold(1_000_000, 200, 0.01), 50);
        assert_eq!(dead_code_threshold(30_100, 200, 0.01), 2);
    }

    #[test]
    fn reserved_ranges_must_be_disjoint_and_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = Codebook::new("b", 10, 2, &mut rng);
        b.reserve("a", 0..4).unwrap();
        assert!(b.reserve("b", 3..5).is_err());
        assert!(b.reserve("c", 8..11).is_err());
        b.reserve("d", 4..10).unwrap();
        assert_eq!(b.reserved_for("d"), Some(&(4..10)));
    }
}
