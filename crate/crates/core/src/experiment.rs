//! One training-plus-evaluation run per (variant, seed), shared by the CLI,
//! the examples and the acceptance tests.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::corpus::{PhonoFeatureSchema, SignRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{build_model, Model, ModelVariant, Prepared};
use crate::train::{train, LogEntry, TrainState};

/// Train- and test-vocabulary records prepared for one model, with labels.
pub fn prepare_splits(model: &Model, records: &[SignRecord], split: &SplitSpec) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let pick = |set: &std::collections::BTreeSet<usize>| -> Result<Vec<Prepared>> {
        records
            .iter()
            .filter(|r| set.contains(&r.gloss_id))
            .map(|r| model.prepare(r, true))
            .collect()
    };
    let (tr, te) = (pick(&split.train)?, pick(&split.test)?);
    if tr.is_empty() || te.is_empty() {
        return Err(Error::Config("both the train and test vocabularies need records".into()));
    }
    Ok((tr, te))
}

/// Builds and trains `variant` from scratch with `cfg.train.seed` replaced by `seed`.
pub fn train_variant(
    cfg: &RunConfig,
    variant: ModelVariant,
    seed: u64,
    schema: &PhonoFeatureSchema,
    train_data: &[Prepared],
    on_log: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<(Model, TrainState)> {
    let tc = crate::train::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut model = build_model(variant, &cfg.model, schema, seed)?;
    let mut state = TrainState::new(&model, &tc);
    train(&mut model, train_data, &tc, &mut state, tc.steps, on_log)?;
    Ok((model, state))
}

pub struct RunOutcome {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<LogEntry>,
    pub report: MetricsReport,
}

/// Trains and evaluates one (variant, seed) pair in memory.
pub fn run_variant(
    cfg: &RunConfig,
    variant: ModelVariant,
    seed: u64,
    schema: &PhonoFeatureSchema,
    records: &[SignRecord],
    split: &SplitSpec,
) -> Result<RunOutcome> {
    let probe_model = build_model(variant, &cfg.model, schema, seed)?;
    let (train_data, test_data) = prepare_splits(&probe_model, records, split)?;
    drop(probe_model);
    let mut log = Vec::new();
    let (model, state) = train_variant(cfg, variant, seed, schema, &train_data, |e| {
        log.push(e.clone());
        Ok(())
    })?;
    let report = evaluate(&model, seed, &train_data, &test_data, &cfg.probe)?;
    Ok(RunOutcome {
        model,
        state,
        log,
        report,
    })
}

fn variant_rank(name: &str) -> usize {
    ModelVariant::ALL.iter().position(|v| v.as_str() == name).unwrap_or(usize::MAX)
}

/// Sorts reports Baseline, PD, PSS, Full, then by seed.
pub fn sort_reports(reports: &mut [MetricsReport]) {
    reports.sort_by_key(|r| (variant_rank(&r.variant), r.seed));
}

/// Plain-text comparison: a reconstruction table and a probe table.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut rows = reports.to_vec();
    sort_reports(&mut rows);
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "seed", "mse_train", "mse_test", "RH", "LH", "NMM", "BODY", "MOVR", "MOVL"
    );
    for r in &rows {
        let s = |id| cell(r.stream_mse.iter().find(|(k, _)| *k == id).map(|(_, v)| *v));
        use crate::pose::StreamId::*;
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>9.4} {:>9.4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.variant,
            r.seed,
            r.mse_train,
            r.mse_test,
            s(Rh),
            s(Lh),
            s(Nmm),
            s(Body),
            s(Movr),
            s(Movl)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "seed", "ISR iv", "R@10", "ISR oov", "R@10", "PFR iv", "R@10", "PFR oov", "R@10", "ppl"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>8.4} {:>8.2} {:>8.4} {:>8.2} {:>8.4} {:>8.2} {:>8.4} {:>8.2} {:>8.2}",
            r.variant,
            r.seed,
            r.isr_iv.mrr,
            r.isr_iv.recall_at_10,
            r.isr_oov.mrr,
            r.isr_oov.recall_at_10,
            r.pfr_iv.mrr,
            r.pfr_iv.recall_at_10,
            r.pfr_oov.mrr,
            r.pfr_oov.recall_at_10,
            r.perplexity_mean
        );
    }
    out
}
