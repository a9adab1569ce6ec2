//! Optimisation loop with Gumbel annealing and periodic dead-code
//! re-initialization.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::mix_seed;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LossWeights, Model, Prepared};
use crate::nn::Adam;
use crate::seq_model::ModelRng;
use crate::vq::{dead_code_threshold, reinit_dead_codes, usage_perplexity, GumbelSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Codebook entries step at `learning_rate * codebook_lr_scale`.
    pub codebook_lr_scale: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gumbel: GumbelSchedule,
    /// Gumbel sampling is used for steps below this fraction of `steps`.
    pub gumbel_fraction: f64,
    pub reinit: bool,
    pub dead_code_interval: u64,
    pub dead_code_min_fraction: f64,
    pub reinit_sample_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 8.61e-5,
            codebook_lr_scale: 1.0,
            beta: 3e-6,
            gamma: 3.0,
            gumbel: GumbelSchedule::default(),
            gumbel_fraction: 0.5,
            reinit: true,
            dead_code_interval: 1000,
            dead_code_min_fraction: 0.01,
            reinit_sample_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.codebook_lr_scale > 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return err("learning_rate must be positive and loss weights non-negative");
        }
        if !(0.0..=1.0).contains(&self.gumbel_fraction) {
            return err("gumbel_fraction must lie in [0, 1]");
        }
        self.gumbel.validate()?;
        if self.reinit {
            if self.dead_code_interval == 0 || self.reinit_sample_size == 0 {
                return err("dead_code_interval and reinit_sample_size must be positive");
            }
            if self.steps > 0 && self.steps < self.dead_code_interval {
                return err("steps must be at least dead_code_interval when reinit is enabled");
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    /// Gumbel temperature at `step`, `None` once sampling is switched off.
    pub fn temperature_at(&self, step: u64) -> Option<f64> {
        ((step as f64) < self.gumbel_fraction * self.steps as f64).then(|| self.gumbel.temperature_at(step))
    }
}

/// Resumable optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            adam: Adam::new(cfg.learning_rate, model.tensor_shapes()),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub diversity: f64,
    pub classification: f64,
    /// Batch perplexity of each codebook.
    pub perplexity: Vec<f64>,
    pub temperature: Option<f64>,
    /// Codes re-initialized after this step, per book.
    pub reinitialized: Vec<usize>,
}

/// Records of `data` used at `step`: fixed per-epoch permutations walked in
/// order, so a run can resume at any step.
pub fn batch_members(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let global = step * batch as u64 + j;
        let epoch = global / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ModelRng::seed_from_u64(mix_seed(seed, 0xE90C_0000 + epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("just set").1[(global % n as u64) as usize]);
    }
    out
}

fn check_finite(step: u64, terms: &[(&str, f64)]) -> Result<()> {
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: (*name).to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Runs `steps` optimizer steps from `state.step`, calling `on_log` after
/// each one.
pub fn train(
    model: &mut Model,
    data: &[Prepared],
    cfg: &TrainConfig,
    state: &mut TrainState,
    steps: u64,
    mut on_log: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if steps == 0 {
        return Ok(());
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    if state.adam.len() != model.tensor_shapes().len() {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }
    state.adam.lr = cfg.learning_rate;
    let weights = cfg.weights();
    let end = state.step + steps;
    while state.step < end {
        let step = state.step;
        let members = batch_members(data.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&Prepared> = members.iter().map(|&i| &data[i]).collect();
        let mut rng = ModelRng::seed_from_u64(mix_seed(cfg.seed, step));
        let temperature = cfg.temperature_at(step);
        let opts = ForwardOptions::train(temperature, weights);
        let (out, grads) = model.gradients(&batch, &opts, Some(&mut rng)).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step },
            e => e,
        })?;
        let l = &out.losses;
        let entry_terms = [
            ("reconstruction loss", l.recon.iter().sum::<f64>()),
            ("codebook loss", l.codebook.iter().sum()),
            ("commitment loss", l.commit.iter().sum()),
            ("diversity loss", l.diversity.iter().sum()),
            ("classification loss", l.classification.iter().sum()),
            ("total loss", l.total),
        ];
        check_finite(step, &entry_terms)?;

        let shapes = model.tensor_shapes();
        let mut slots: Vec<Option<&crate::tape::Mat>> = vec![None; shapes.len()];
        for (slot, g) in &grads.by_slot {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: "gradient".into(),
                    step,
                });
            }
            slots[*slot] = Some(g);
        }
        let mut scales = vec![1.0; shapes.len()];
        for s in &mut scales[model.params.len()..] {
            *s = cfg.codebook_lr_scale;
        }
        state.adam.step_scaled(&mut model.tensors_mut(), &slots, &scales);

        for (book, q) in model.books.iter_mut().zip(&out.quantized) {
            book.record_usage(&q.indices);
        }
        let mut reinitialized = vec![0; model.books.len()];
        // A code re-seeded on the last step would never be trained.
        if cfg.reinit && (step + 1) % cfg.dead_code_interval == 0 && step + 1 < cfg.steps {
            for (b, book) in model.books.iter_mut().enumerate() {
                let threshold = dead_code_threshold(book.window_assignments, book.size(), cfg.dead_code_min_fraction);
                let q = &out.quantized[b];
                let free: Vec<usize> = (0..q.forced_mask.len()).filter(|&r| !q.forced_mask[r]).collect();
                let sample = out.encoder_outputs[b].select(Axis(0), &free);
                if sample.nrows() >= cfg.reinit_sample_size {
                    reinitialized[b] = reinit_dead_codes(book, &sample, threshold, cfg.reinit_sample_size, &mut rng)?;
                }
                book.reset_usage();
            }
        }

        let entry = LogEntry {
            step,
            total: l.total,
            recon: entry_terms[0].1,
            codebook: entry_terms[1].1,
            commit: entry_terms[2].1,
            diversity: entry_terms[3].1,
            classification: entry_terms[4].1,
            perplexity: out
                .quantized
                .iter()
                .zip(&model.books)
                .map(|(q, b)| usage_perplexity(&q.indices, b.size()))
                .collect(),
            temperature,
            reinitialized,
        };
        state.step += 1;
        on_log(&entry)?;
    }
    Ok(())
}
