//! Reconstruction metrics, code extraction and the probe-based report.

use serde::{Deserialize, Serialize};

use crate::corpus::{Feature, SignRecord};
use crate::error::{invalid, Result};
use crate::model::{Channel, ForwardOptions, Model, Prepared};
use crate::pose::StreamId;
use crate::probe::{isr_protocol, pfr_protocol, support_split, ProbeConfig, RankScore};
use crate::tape::Mat;
use crate::vq::perplexity;

const EVAL_BATCH: usize = 64;

/// Overall and per-channel mean squared error with the raw accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub overall: f64,
    pub channels: Vec<(Channel, f64)>,
    pub sums: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ReconReport {
    pub fn channel(&self, c: Channel) -> Option<f64> {
        self.channels.iter().find(|(k, _)| *k == c).map(|(_, v)| *v)
    }
}

pub fn eval_reconstruction(model: &Model, data: &[Prepared]) -> Result<ReconReport> {
    if data.is_empty() {
        return Err(invalid("no records to evaluate"));
    }
    let channels = model.channels();
    let mut sums = vec![0.0; channels.len()];
    let mut counts = vec![0usize; channels.len()];
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let out = model.forward(&batch, &ForwardOptions::eval(), None)?;
        for (i, (s, n)) in out.squared_error.iter().enumerate() {
            sums[i] += s;
            counts[i] += n;
        }
    }
    let overall = sums.iter().sum::<f64>() / counts.iter().sum::<usize>() as f64;
    Ok(ReconReport {
        overall,
        channels: channels.iter().enumerate().map(|(i, &c)| (c, sums[i] / counts[i] as f64)).collect(),
        sums,
        counts,
    })
}

/// Eval-mode hard-quantized code vectors, one row per record.
pub fn extract_codes(model: &Model, data: &[Prepared]) -> Result<Mat> {
    let width = model.bottleneck();
    let mut out = Mat::zeros((data.len(), width));
    for (c, chunk) in data.chunks(EVAL_BATCH).enumerate() {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        for (i, v) in model.code_vectors(&batch)?.into_iter().enumerate() {
            out.row_mut(c * EVAL_BATCH + i).assign(&ndarray::Array1::from(v));
        }
    }
    Ok(out)
}

/// Perplexity of each book's eval-mode assignment histogram over `data`.
pub fn codebook_perplexity(model: &Model, data: &[Prepared]) -> Result<Vec<f64>> {
    let mut hist: Vec<Vec<f64>> = model.books.iter().map(|b| vec![0.0; b.size()]).collect();
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        for rec in model.code_indices(&batch)? {
            for (b, k) in rec {
                hist[b][k] += 1.0;
            }
        }
    }
    hist.iter().map(|h| perplexity(h)).collect()
}

/// One evaluated run: the CSV row plus per-book perplexities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub mse_train: f64,
    pub mse_test: f64,
    /// Per-stream test MSE in `StreamId::ALL` order; empty for single-stream models.
    pub stream_mse: Vec<(StreamId, f64)>,
    pub isr_iv: RankScore,
    pub isr_oov: RankScore,
    pub pfr_iv: RankScore,
    pub pfr_oov: RankScore,
    pub perplexity: Vec<(String, f64)>,
    pub perplexity_mean: f64,
}

pub const CSV_COLUMNS: [&str; 19] = [
    "variant",
    "seed",
    "mse_train",
    "mse_test",
    "mse_rh",
    "mse_lh",
    "mse_nmm",
    "mse_body",
    "mse_movr",
    "mse_movl",
    "isr_mrr_iv",
    "isr_r10_iv",
    "isr_mrr_oov",
    "isr_r10_oov",
    "pfr_mrr_iv",
    "pfr_r10_iv",
    "pfr_mrr_oov",
    "pfr_r10_oov",
    "perplexity_mean",
];

impl MetricsReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.variant.clone(), self.seed.to_string(), self.mse_train.to_string(), self.mse_test.to_string()];
        for id in StreamId::ALL {
            cells.push(
                self.stream_mse
                    .iter()
                    .find(|(s, _)| *s == id)
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_default(),
            );
        }
        for r in [self.isr_iv, self.isr_oov, self.pfr_iv, self.pfr_oov] {
            cells.push(r.mrr.to_string());
            cells.push(r.recall_at_10.to_string());
        }
        cells.push(self.perplexity_mean.to_string());
        cells.join(",")
    }
}

fn label_rows(data: &[Prepared], idx: &[usize]) -> Result<Vec<Vec<usize>>> {
    idx.iter()
        .map(|&i| {
            data[i]
                .labels
                .map(|l| Feature::ALL.iter().map(|&f| l.get(f)).collect())
                .ok_or_else(|| invalid("feature probes need labeled records"))
        })
        .collect()
}

/// Gloss-recognition probe on held-out instances of unseen glosses.
pub fn run_oov_isr_protocol(model: &Model, test: &[SignRecord], cfg: &ProbeConfig, seed: u64) -> Result<RankScore> {
    let data: Vec<Prepared> = test.iter().map(|r| model.prepare(r, false)).collect::<Result<_>>()?;
    let codes = extract_codes(model, &data)?;
    let glosses: Vec<usize> = data.iter().map(|p| p.gloss_id).collect();
    isr_protocol(&codes, &glosses, cfg, seed, false)
}

/// Full report for one trained model. `train` and `test` must carry labels.
pub fn evaluate(model: &Model, seed: u64, train: &[Prepared], test: &[Prepared], cfg: &ProbeConfig) -> Result<MetricsReport> {
    let recon_train = eval_reconstruction(model, train)?;
    let recon_test = eval_reconstruction(model, test)?;
    let stream_mse = if model.plan.is_multi_stream() {
        StreamId::ALL
            .iter()
            .filter_map(|&id| recon_test.channel(Channel::Stream(id)).map(|v| (id, v)))
            .collect()
    } else {
        Vec::new()
    };

    let train_codes = extract_codes(model, train)?;
    let test_codes = extract_codes(model, test)?;
    let train_glosses: Vec<usize> = train.iter().map(|p| p.gloss_id).collect();
    let test_glosses: Vec<usize> = test.iter().map(|p| p.gloss_id).collect();
    let isr_iv = isr_protocol(&train_codes, &train_glosses, cfg, seed, false)?;
    let isr_oov = isr_protocol(&test_codes, &test_glosses, cfg, seed, false)?;

    let (support, held_out) = support_split(&train_glosses, cfg.support_fraction, seed);
    let support_x = train_codes.select(ndarray::Axis(0), &support);
    let held_x = train_codes.select(ndarray::Axis(0), &held_out);
    let support_y = label_rows(train, &support)?;
    let held_y = label_rows(train, &held_out)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let test_y = label_rows(test, &all)?;
    let pfr = pfr_protocol((&support_x, &support_y), &[(&held_x, &held_y), (&test_codes, &test_y)], cfg, seed)?;

    let ppl = codebook_perplexity(model, train)?;
    Ok(MetricsReport {
        variant: model.variant.to_string(),
        seed,
        mse_train: recon_train.overall,
        mse_test: recon_test.overall,
        stream_mse,
        isr_iv,
        isr_oov,
        pfr_iv: pfr[0],
        pfr_oov: pfr[1],
        perplexity_mean: ppl.iter().sum::<f64>() / ppl.len() as f64,
        perplexity: model.books.iter().map(|b| b.name.clone()).zip(ppl).collect(),
    })
}
