//! MLP probes on frozen code vectors and ranking metrics.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::mix_seed;
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{Adam, Linear, ParamStore};
use crate::seq_model::ModelRng;
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each gloss's instances used to fit the ISR probe.
    pub support_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 256,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            support_fraction: 0.5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("probe hidden, epochs, batch_size and learning_rate must be positive".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::Config("support_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean reciprocal rank and Recall@10 (percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub mrr: f64,
    pub recall_at_10: f64,
}

/// 1-based rank of `target` in descending score order, ties to the lower
/// class index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Scores rows of `scores` against `targets`. A `None` target (a class the
/// classifier never saw) counts as reciprocal rank 0 and a miss.
pub fn score_ranking(scores: &Mat, targets: &[Option<usize>]) -> Result<RankScore> {
    if scores.nrows() != targets.len() {
        return Err(shape("one target per score row required"));
    }
    if targets.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let (mut rr, mut hits) = (0.0, 0usize);
    for (row, t) in scores.rows().into_iter().zip(targets) {
        let Some(t) = *t else { continue };
        if t >= row.len() {
            return Err(invalid(format!("target {t} outside {} classes", row.len())));
        }
        let r = rank_of(row.as_slice().expect("standard layout"), t);
        rr += 1.0 / r as f64;
        if r <= 10 {
            hits += 1;
        }
    }
    let n = targets.len() as f64;
    Ok(RankScore {
        mrr: rr / n,
        recall_at_10: 100.0 * hits as f64 / n,
    })
}

/// Two-layer MLP with one softmax head per target.
#[derive(Debug, Clone)]
pub struct Probe {
    params: ParamStore,
    hidden: Linear,
    heads: Vec<Linear>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Probe {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Mat> {
        self.params.iter().map(|(_, m)| m)
    }

    fn standardize(&self, x: &Mat) -> Mat {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.scale[j];
            }
        }
        z
    }

    /// Class scores per head, `N x classes`.
    pub fn scores(&self, features: &Mat) -> Result<Vec<Mat>> {
        if features.ncols() != self.mean.len() {
            return Err(shape(format!("probe expects {} features, got {}", self.mean.len(), features.ncols())));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, 0);
        let x = tape.constant(self.standardize(features));
        let h = self.hidden.forward(&mut tape, &p, x);
        let h = tape.relu(h);
        Ok(self
            .heads
            .iter()
            .map(|head| {
                let o = head.forward(&mut tape, &p, h);
                tape.value(o).clone()
            })
            .collect())
    }
}

/// Fits a probe. `targets[i][h]` is sample `i`'s class for head `h`, with
/// `classes[h]` classes; every class needs at least one sample.
pub fn train_probe(features: &Mat, targets: &[Vec<usize>], classes: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<Probe> {
    cfg.validate()?;
    let n = features.nrows();
    if n == 0 || targets.len() != n {
        return Err(shape("one target row per feature row required"));
    }
    if classes.is_empty() || targets.iter().any(|t| t.len() != classes.len()) {
        return Err(shape("every sample needs one target per head"));
    }
    for (h, &c) in classes.iter().enumerate() {
        if c < 2 {
            return Err(Error::Config(format!("head {h} needs at least 2 classes")));
        }
        let mut seen = vec![false; c];
        for t in targets {
            if t[h] >= c {
                return Err(invalid(format!("target {} outside {c} classes", t[h])));
            }
            seen[t[h]] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("head {h} class {missing} has no training examples")));
        }
    }

    let d = features.ncols();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in features.rows() {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in features.rows() {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();

    let mut rng = ModelRng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let hidden = Linear::new(&mut params, "probe.hidden", d, cfg.hidden, &mut rng);
    let heads: Vec<Linear> = classes
        .iter()
        .enumerate()
        .map(|(h, &c)| Linear::new(&mut params, &format!("probe.head{h}"), cfg.hidden, c, &mut rng))
        .collect();
    let mut probe = Probe {
        params,
        hidden,
        heads,
        mean,
        scale,
    };
    let x = probe.standardize(features);
    let shapes: Vec<(usize, usize)> = probe.params.iter().map(|(_, m)| m.dim()).collect();
    let mut adam = Adam::new(cfg.learning_rate, shapes);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = probe.params.bind(&mut tape, 0);
            let xb = tape.constant(x.select(ndarray::Axis(0), chunk));
            let h = probe.hidden.forward(&mut tape, &p, xb);
            let h = tape.relu(h);
            let losses: Vec<_> = probe
                .heads
                .iter()
                .enumerate()
                .map(|(hi, head)| {
                    let o = head.forward(&mut tape, &p, h);
                    let t: Vec<usize> = chunk.iter().map(|&i| targets[i][hi]).collect();
                    (tape.cross_entropy(o, t), 1.0)
                })
                .collect();
            let loss = tape.weighted_sum(&losses);
            let g = tape.backward(loss);
            let mut slots: Vec<Option<&Mat>> = vec![None; probe.params.len()];
            for (s, m) in &g.by_slot {
                slots[*s] = Some(m);
            }
            let mut vals: Vec<&mut Mat> = probe.params.values_mut().collect();
            adam.step(&mut vals, &slots);
        }
    }
    Ok(probe)
}

/// Per-gloss support/eval split of record indices. Glosses with fewer than
/// two instances are dropped.
pub fn support_split(glosses: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_gloss: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in glosses.iter().enumerate() {
        by_gloss.entry(g).or_default().push(i);
    }
    let mut rng = ModelRng::seed_from_u64(mix_seed(seed, 0x5a99));
    let (mut support, mut eval) = (Vec::new(), Vec::new());
    let mut dropped = 0;
    for idx in by_gloss.values_mut() {
        if idx.len() < 2 {
            dropped += 1;
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        support.extend_from_slice(&idx[..k]);
        eval.extend_from_slice(&idx[k..]);
    }
    if dropped > 0 {
        warn!("{dropped} gloss(es) with a single instance excluded from the probe split");
    }
    (support, eval)
}

fn rows(features: &Mat, idx: &[usize]) -> Mat {
    features.select(ndarray::Axis(0), idx)
}

/// Gloss-recognition probe over one vocabulary: fit on each gloss's support
/// instances and rank the held-out ones. With `leak`, the probe is scored on
/// its own support set.
pub fn isr_protocol(features: &Mat, glosses: &[usize], cfg: &ProbeConfig, seed: u64, leak: bool) -> Result<RankScore> {
    if features.nrows() != glosses.len() {
        return Err(shape("one gloss per feature row required"));
    }
    let (support, held_out) = support_split(glosses, cfg.support_fraction, seed);
    let classes: BTreeMap<usize, usize> = support
        .iter()
        .map(|&i| glosses[i])
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(c, g)| (g, c))
        .collect();
    if classes.len() < 2 {
        return Err(invalid("the gloss probe needs at least two glosses with two or more instances"));
    }
    let targets: Vec<Vec<usize>> = support.iter().map(|&i| vec![classes[&glosses[i]]]).collect();
    let probe = train_probe(&rows(features, &support), &targets, &[classes.len()], cfg, seed)?;
    let scored = if leak { &support } else { &held_out };
    let scores = probe.scores(&rows(features, scored))?;
    let t: Vec<Option<usize>> = scored.iter().map(|&i| classes.get(&glosses[i]).copied()).collect();
    score_ranking(&scores[0], &t)
}

/// Phonological feature probe: one head per feature, fit on `train`, scored
/// on each of `evals`. Feature classes absent from the fitting set are
/// dropped from that head; evaluation samples of such a class score 0.
pub fn pfr_protocol(
    train: (&Mat, &[Vec<usize>]),
    evals: &[(&Mat, &[Vec<usize>])],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<RankScore>> {
    let (x, labels) = train;
    let heads = labels.first().map(|l| l.len()).ok_or_else(|| invalid("no probe training samples"))?;
    let mut maps: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); heads];
    for l in labels {
        for h in 0..heads {
            let next = maps[h].len();
            maps[h].entry(l[h]).or_insert(next);
        }
    }
    for m in &mut maps {
        let keys: Vec<usize> = m.keys().copied().collect();
        *m = keys.into_iter().enumerate().map(|(c, k)| (k, c)).collect();
    }
    let classes: Vec<usize> = maps.iter().map(|m| m.len().max(2)).collect();
    if maps.iter().any(|m| m.len() < 2) {
        return Err(Error::Config("every feature needs two classes among the probe training samples".into()));
    }
    let targets: Vec<Vec<usize>> = labels.iter().map(|l| (0..heads).map(|h| maps[h][&l[h]]).collect()).collect();
    let probe = train_probe(x, &targets, &classes, cfg, seed)?;
    evals
        .iter()
        .map(|(ex, el)| {
            let scores = probe.scores(ex)?;
            let mut mrr = 0.0;
            let mut r10 = 0.0;
            for (h, s) in scores.iter().enumerate() {
                let t: Vec<Option<usize>> = el.iter().map(|l| maps[h].get(&l[h]).copied()).collect();
                let r = score_ranking(s, &t)?;
                mrr += r.mrr;
                r10 += r.recall_at_10;
            }
            Ok(RankScore {
                mrr: mrr / heads as f64,
                recall_at_10: r10 / heads as f64,
            })
        })
        .collect()
}
