//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4,12` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vq_sign::config::{Preset, RunConfig};
use vq_sign::corpus::{generate_corpus, CorpusConfig, PhonoFeatureSchema, SignRecord, SplitSpec};
use vq_sign::eval::{codebook_perplexity, MetricsReport};
use vq_sign::experiment::{prepare_splits, run_variant, train_variant};
use vq_sign::model::{
    build_model, pss_force, ForwardOptions, FrozenBook, LossWeights, Mode, Model, ModelConfig, ModelVariant, Prepared,
};
use vq_sign::pose::{partition_pose, PoseSequence, SkeletonLayout, StreamId};
use vq_sign::probe::{rank_of, score_ranking};
use vq_sign::seq_model::{EncoderConfig, ModelRng};
use vq_sign::tape::Tape;
use vq_sign::train::LogEntry;
use vq_sign::vq::{assign_nearest, quantize_hard, straight_through, Codebook};

type Mat = Array2<f64>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn c1_quantizer_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let entries = uniform(200, 32, -1.0, 1.0, &mut rng);
    let mut book = Codebook::from_entries("oracle", entries.clone());
    let z = uniform(1000, 32, -1.0, 1.0, &mut rng);
    let t = Instant::now();
    let out = quantize_hard(&z, &mut book).expect("quantize");
    let elapsed = t.elapsed();

    let mut exact = 0;
    for (i, row) in z.rows().into_iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for k in 0..entries.nrows() {
            let mut d = 0.0;
            for l in 0..32 {
                let e = row[l] - entries[[k, l]];
                d += e * e;
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        if out.indices[i] == best.1 && out.quantized.row(i) == entries.row(best.1) {
            exact += 1;
        }
    }
    verdict(
        exact == 1000 && elapsed < Duration::from_secs(5),
        format!("{exact}/1000 exact, {:.1} ms", elapsed.as_secs_f64() * 1e3),
    )
}

/// Loss of a linear decoder `y = q V` against `target`, as a plain function.
fn decoder_loss(q: &Mat, v: &Mat, target: &Mat) -> f64 {
    let y = q.dot(v);
    y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn c2_straight_through() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    let mut identity = true;
    for _ in 0..20 {
        let n = rng.random_range(3..9);
        let d_in = rng.random_range(3..8);
        let lc = rng.random_range(2..7);
        let k = rng.random_range(4..13);
        let d_out = rng.random_range(2..6);
        let x = uniform(n, d_in, -1.0, 1.0, &mut rng);
        let w = uniform(d_in, lc, -1.0, 1.0, &mut rng);
        let v = uniform(lc, d_out, -1.0, 1.0, &mut rng);
        let target = uniform(n, d_out, -1.0, 1.0, &mut rng);
        let book = Codebook::from_entries("mini", uniform(k, lc, -1.0, 1.0, &mut rng));

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.leaf(w, 0);
        let z = tape.matmul(xv, wv);
        let q = assign_nearest(tape.value(z), &book).expect("assign").quantized;
        let st = straight_through(&mut tape, z, &q).expect("st");
        let vv = tape.leaf(v.clone(), 1);
        let y = tape.matmul(st, vv);
        let t = tape.constant(target.clone());
        let loss = tape.mean_sq_diff(y, t);
        let grads = tape.backward(loss);
        let dz = grads.wrt(z).expect("gradient reaches z").clone();

        let mut tape_q = Tape::new();
        let qv = tape_q.leaf(q.clone(), 0);
        let vv = tape_q.constant(v.clone());
        let y = tape_q.matmul(qv, vv);
        let t = tape_q.constant(target.clone());
        let loss_q = tape_q.mean_sq_diff(y, t);
        let dq = tape_q.backward(loss_q).wrt(qv).expect("gradient reaches q").clone();
        identity &= dz == dq;

        let h = 1e-6;
        let mut fd = Vec::with_capacity(q.len());
        for idx in 0..q.len() {
            let (r, c) = (idx / lc, idx % lc);
            let mut plus = q.clone();
            plus[[r, c]] += h;
            let mut minus = q.clone();
            minus[[r, c]] -= h;
            fd.push((decoder_loss(&plus, &v, &target) - decoder_loss(&minus, &v, &target)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&dz.iter().copied().collect::<Vec<_>>(), &fd));
    }
    verdict(
        identity && worst < 1e-4,
        format!("dL/dz == dL/dq on all 20: {identity}; worst relative error vs FD {worst:.2e}"),
    )
}

fn tiny_records(signs: usize, instances: usize, seed: u64) -> (Vec<SignRecord>, SplitSpec) {
    let cfg = CorpusConfig {
        signs,
        instances_per_sign: instances,
        min_frames: 16,
        max_frames: 20,
        seed,
        ..CorpusConfig::default()
    };
    generate_corpus(&PhonoFeatureSchema::default(), &cfg).expect("corpus")
}

fn flat(m: &Model, t: usize) -> Vec<f64> {
    let mut m = m.clone();
    m.tensors_mut()[t].iter().copied().collect()
}

/// Finite-difference check of every trainable scalar, with the quantizer's
/// assignments (and PSS forcing) held at the values of one training pass.
fn e2e_check(variant: ModelVariant) -> (f64, usize, Duration) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            model_dim: 16,
            layers: 1,
            dropout: 0.0,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let schema = PhonoFeatureSchema::default();
    let (records, _) = tiny_records(2, 1, 3);
    let mut model = build_model(variant, &cfg, &schema, 7).expect("model");
    let prepared: Vec<Prepared> = records.iter().map(|r| model.prepare(r, true).expect("prepare")).collect();
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let weights = LossWeights { beta: 0.5, gamma: 3.0 };

    let mut rng = ModelRng::seed_from_u64(5);
    let pass = model
        .forward(&batch, &ForwardOptions::train(None, weights), Some(&mut rng))
        .expect("train forward");
    let frozen: Vec<FrozenBook> = pass
        .quantized
        .iter()
        .zip(&pass.encoder_outputs)
        .zip(&model.books)
        .map(|((q, z), book)| FrozenBook {
            indices: q.indices.clone(),
            z_e: z.clone(),
            z_q: book.lookup(&q.indices),
            forced: q.forced_mask.clone(),
        })
        .collect();
    let opts = ForwardOptions {
        mode: Mode::Eval,
        gumbel_temperature: None,
        weights,
        frozen: Some(&frozen),
    };
    let t = Instant::now();
    let (_, grads) = model.gradients(&batch, &opts, None).expect("gradients");
    let shapes = model.tensor_shapes();
    let analytic: Vec<Vec<f64>> = (0..shapes.len())
        .map(|slot| match grads.by_slot.iter().find(|(s, _)| *s == slot) {
            Some((_, g)) => g.iter().copied().collect(),
            None => vec![0.0; shapes[slot].0 * shapes[slot].1],
        })
        .collect();

    let h = 1e-5;
    let mut all_a = Vec::new();
    let mut all_fd = Vec::new();
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    for (slot, a) in analytic.iter().enumerate() {
        let base = flat(&model, slot);
        let mut fd = Vec::with_capacity(base.len());
        for (i, &x) in base.iter().enumerate() {
            let mut eval_at = |value: f64| {
                model.tensors_mut()[slot].as_slice_mut().expect("contiguous")[i] = value;
                model.forward(&batch, &opts, None).expect("forward").losses.total
            };
            let (up, down) = (eval_at(x + h), eval_at(x - h));
            eval_at(x);
            fd.push((up - down) / (2.0 * h));
        }
        scalars += fd.len();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            worst = worst.max(rel_err(a, &fd));
        }
        all_a.extend_from_slice(a);
        all_fd.extend(fd);
    }
    (worst.max(rel_err(&all_a, &all_fd)), scalars, t.elapsed())
}

fn c3_end_to_end() -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for v in [ModelVariant::Baseline, ModelVariant::Full] {
        let (err, n, took) = e2e_check(v);
        pass &= err < 1e-3;
        detail.push(format!("{v}: {n} scalars, worst tensor {err:.2e} ({:.0} s)", took.as_secs_f64()));
    }
    verdict(pass, detail.join("; "))
}

fn c4_partition() -> Verdict {
    let layout = SkeletonLayout::default();
    let j = layout.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut zeros_ok = true;
    let mut behaviour_ok = true;
    for n in 0..1000 {
        let frames = rng.random_range(2..64);
        let sample = rng.random_range(1..=frames);
        let data = Array3::from_shape_simple_fn((frames, j, 3), || rng.random_range(-3.0..3.0));
        let pose = PoseSequence::new(data.clone()).expect("pose");
        let b = partition_pose(&pose, &layout, sample).expect("partition");
        let rh = b.get(StreamId::Rh);
        let lh = b.get(StreamId::Lh);
        let nmm = b.get(StreamId::Nmm);
        for f in 0..sample {
            for c in 0..3 {
                zeros_ok &= rh[[f, layout.wrist_right - layout.right_hand.start, c]] == 0.0;
                zeros_ok &= lh[[f, layout.wrist_left - layout.left_hand.start, c]] == 0.0;
                zeros_ok &= nmm[[f, layout.nose - layout.face.start, c]] == 0.0;
            }
        }
        // On a subset, recover each stream's sources by perturbing one
        // keypoint at a time and watching which streams move.
        if n < 40 {
            for k in 0..j {
                let mut moved = data.clone();
                for f in 0..frames {
                    moved[[f, k, 0]] += 0.5;
                }
                let m = partition_pose(&PoseSequence::new(moved).expect("pose"), &layout, sample).expect("partition");
                for id in StreamId::ALL {
                    let changed = m.get(id) != b.get(id);
                    behaviour_ok &= changed == layout.stream_sources(id).contains(&k);
                }
            }
        }
    }
    let mut count = vec![0usize; j];
    for id in StreamId::ALL {
        for k in layout.stream_sources(id) {
            count[k] += 1;
        }
    }
    let covered = count.iter().all(|&c| c > 0);
    let dup: BTreeSet<usize> = (0..j).filter(|&k| count[k] > 1).collect();
    let wrists: BTreeSet<usize> = [layout.wrist_right, layout.wrist_left].into();
    verdict(
        zeros_ok && behaviour_ok && covered && dup == wrists,
        format!(
            "exact zeros: {zeros_ok}; sources match perturbation: {behaviour_ok}; cover {covered}; duplicated {dup:?}"
        ),
    )
}

fn c6a_forcing_rate() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let book = Codebook::new("forced", 200, 32, &mut rng);
    let z = uniform(10_000, 32, -1.0, 1.0, &mut rng);
    let base = assign_nearest(&z, &book).expect("assign");
    let designated: Vec<(usize, usize)> = (0..10_000).map(|r| (r, rng.random_range(0..200))).collect();
    let out = pss_force(&base, &z, &book, &designated, 0.5, &mut rng).expect("force");
    let forced = out.forced_mask.iter().filter(|&&m| m).count();
    let frac = forced as f64 / 10_000.0;
    let consistent = designated
        .iter()
        .all(|&(r, k)| !out.forced_mask[r] || (out.indices[r] == k && out.quantized.row(r) == book.entries.row(k)));
    verdict(
        (frac - 0.5).abs() <= 0.02 && consistent,
        format!("forced fraction {frac:.4}; forced rows carry their code: {consistent}"),
    )
}

fn c12_metrics() -> Verdict {
    // targets ranked 1st, 2nd and 4th
    let scores = ndarray::array![
        [0.9, 0.1, 0.0, 0.0, 0.0],
        [0.5, 0.4, 0.3, 0.2, 0.1],
        [0.1, 0.2, 0.3, 0.4, 0.5],
    ];
    let hand = score_ranking(&scores, &[Some(0), Some(1), Some(1)]).expect("score");
    let hand_ok = (hand.mrr - 7.0 / 12.0).abs() < 1e-12 && hand.recall_at_10 == 100.0;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 20_000;
    let random = uniform(n, 100, 0.0, 1.0, &mut rng);
    let targets: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..100))).collect();
    let r = score_ranking(&random, &targets).expect("score");
    // independent rank: position after a full descending sort
    let mut rr = 0.0;
    for (row, t) in random.rows().into_iter().zip(&targets) {
        let t = t.expect("target");
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let rank = order.iter().position(|&c| c == t).expect("present") + 1;
        assert_eq!(rank, rank_of(row.as_slice().expect("contiguous"), t));
        rr += 1.0 / rank as f64;
    }
    let oracle_ok = (rr / n as f64 - r.mrr).abs() < 1e-12;
    verdict(
        hand_ok && oracle_ok && (r.recall_at_10 - 10.0).abs() <= 1.0,
        format!(
            "hand MRR {:.4} R@10 {:.0}%; random R@10 {:.2}%, MRR matches sort oracle: {oracle_ok}",
            hand.mrr, hand.recall_at_10, r.recall_at_10
        ),
    )
}

fn c7_determinism() -> Verdict {
    let exe = env!("CARGO_BIN_EXE_vq-sign");
    let dir = tempfile::tempdir().expect("tempdir");
    let common = [
        "--set",
        "corpus.signs=40",
        "--set",
        "corpus.instances_per_sign=2",
        "--set",
        "corpus.splits=[0.6,0.2,0.2]",
        "--set",
        "train.steps=12",
        "--set",
        "train.dead_code_interval=6",
        "--set",
        "train.batch_size=4",
        "--set",
        "probe.epochs=2",
        "--set",
        "ablation.seeds=[3]",
    ];
    let run = |args: &[&str]| {
        let out = Command::new(exe)
            .args(common)
            .args(args)
            .env("VQ_SIGN_THREADS", "1")
            .env("RUST_LOG", "warn")
            .output()
            .expect("run vq-sign");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let root = dir.path();
    let data = root.join("data");
    run(&["gen", "--out", data.to_str().expect("utf8")]);
    let dataset = data.join("corpus.slds");
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        run(&[
            "ablation",
            "--dataset",
            dataset.to_str().expect("utf8"),
            "--out",
            out.to_str().expect("utf8"),
            "--jobs",
            "1",
        ]);
        outs.push(out);
    }
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let mut same_ckpt = true;
    let mut members = 0;
    for v in ModelVariant::ALL {
        let member = format!("{}-seed3", v.as_str());
        let a = read(&outs[0].join(&member).join("checkpoint.json"));
        let b = read(&outs[1].join(&member).join("checkpoint.json"));
        same_ckpt &= !a.is_empty() && a == b;
        members += 1;
    }
    let csv_a = read(&outs[0].join("ablation.csv"));
    let csv_b = read(&outs[1].join("ablation.csv"));
    let rows = String::from_utf8_lossy(&csv_a).lines().count().saturating_sub(1);
    let same_csv = !csv_a.is_empty() && csv_a == csv_b && rows == members;
    verdict(
        same_ckpt && same_csv,
        format!("{members} checkpoints byte-identical: {same_ckpt}; {rows} CSV rows identical: {same_csv}"),
    )
}

/// Default corpus with the desk preset; shared by the directional criteria.
struct Study {
    cfg: RunConfig,
    schema: PhonoFeatureSchema,
    records: Vec<SignRecord>,
    split: SplitSpec,
    reports: Vec<MetricsReport>,
    baseline_logs: Vec<(u64, Vec<LogEntry>)>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

impl Study {
    fn new() -> Self {
        let mut cfg = RunConfig::preset(Preset::Desk);
        if let Some(steps) = std::env::var("ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok()) {
            cfg.train.steps = steps;
        }
        let schema = PhonoFeatureSchema::default();
        let (records, split) = generate_corpus(&schema, &cfg.corpus).expect("default corpus");
        Study {
            cfg,
            schema,
            records,
            split,
            reports: Vec::new(),
            baseline_logs: Vec::new(),
        }
    }

    fn ensure_ablation(&mut self) {
        if !self.reports.is_empty() {
            return;
        }
        for seed in SEEDS {
            for v in ModelVariant::ALL {
                let t = Instant::now();
                let out = run_variant(&self.cfg, v, seed, &self.schema, &self.records, &self.split).expect("run");
                eprintln!(
                    "  {v} seed {seed}: test mse {:.4}, isr {:.3}, pfr {:.3}, ppl {:.1} ({:.0} s)",
                    out.report.mse_test,
                    out.report.isr_oov.mrr,
                    out.report.pfr_oov.mrr,
                    out.report.perplexity_mean,
                    t.elapsed().as_secs_f64()
                );
                if v == ModelVariant::Baseline {
                    self.baseline_logs.push((seed, out.log));
                }
                self.reports.push(out.report);
            }
        }
    }

    fn report(&self, v: ModelVariant, seed: u64) -> &MetricsReport {
        self.reports
            .iter()
            .find(|r| r.variant == v.as_str() && r.seed == seed)
            .expect("report present")
    }

    fn per_seed(&self, holds: impl Fn(&dyn Fn(ModelVariant) -> f64) -> bool, metric: fn(&MetricsReport) -> f64) -> usize {
        SEEDS.iter().filter(|&&s| holds(&|v| metric(self.report(v, s)))).count()
    }

    /// Trains a baseline and returns (mean logged perplexity over the last
    /// tenth of training, eval-mode perplexity over the training set).
    fn baseline_perplexity(&self, seed: u64, mitigated: bool) -> (f64, f64) {
        let mut cfg = self.cfg.clone();
        if !mitigated {
            cfg.train.reinit = false;
            cfg.train.gumbel_fraction = 0.0;
        }
        let probe = build_model(ModelVariant::Baseline, &cfg.model, &self.schema, seed).expect("model");
        let (train, _) = prepare_splits(&probe, &self.records, &self.split).expect("splits");
        let mut log = Vec::new();
        let (model, _) = train_variant(&cfg, ModelVariant::Baseline, seed, &self.schema, &train, |e| {
            log.push(e.clone());
            Ok(())
        })
        .expect("train");
        let ppl = codebook_perplexity(&model, &train).expect("perplexity");
        (final_perplexity(&log, cfg.train.steps), ppl.iter().sum::<f64>() / ppl.len() as f64)
    }
}

fn final_perplexity(log: &[LogEntry], steps: u64) -> f64 {
    let from = steps - (steps / 10).max(1);
    let tail: Vec<f64> = log
        .iter()
        .filter(|e| e.step >= from)
        .map(|e| e.perplexity.iter().sum::<f64>() / e.perplexity.len() as f64)
        .collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn c5_collapse(study: &mut Study) -> Verdict {
    study.ensure_ablation();
    let k = study.cfg.model.codebook_size as f64;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let with = match study.baseline_logs.iter().find(|(s, _)| *s == seed) {
            Some((_, log)) => final_perplexity(log, study.cfg.train.steps),
            None => study.baseline_perplexity(seed, true).0,
        };
        let (without, _) = study.baseline_perplexity(seed, false);
        eprintln!("  baseline seed {seed}: final perplexity {with:.1} mitigated, {without:.1} without");
        rows.push((with, without));
    }
    let eval_ppl = study.report(ModelVariant::Baseline, 0).perplexity_mean;
    let above = rows.iter().filter(|(w, _)| *w >= 0.4 * k).count();
    let wins = rows.iter().filter(|(w, wo)| w >= wo).count();
    let fmt: Vec<String> = rows.iter().map(|(w, wo)| format!("{w:.1}/{wo:.1}")).collect();
    verdict(
        above == 5 && wins >= 4,
        format!(
            "mitigated/unmitigated final perplexity per seed [{}]; >= {:.0} on {above}/5, >= unmitigated on {wins}/5; \
             eval-mode perplexity over the training set, seed 0: {eval_ppl:.1}",
            fmt.join(", "),
            0.4 * k
        ),
    )
}

fn c6b_designated(study: &Study) -> Verdict {
    let mut cfg = study.cfg.clone();
    cfg.model.pss.p_force = 1.0;
    let probe = build_model(ModelVariant::Pss, &cfg.model, &study.schema, 0).expect("model");
    let (train, _) = prepare_splits(&probe, &study.records, &study.split).expect("splits");
    let (model, _) = train_variant(&cfg, ModelVariant::Pss, 0, &study.schema, &train, |_| Ok(())).expect("train");
    let mut hits = vec![0usize; model.slots.len()];
    for p in &train {
        let labels = p.labels.expect("labels");
        let idx = model.designated_indices(p).expect("indices");
        for (j, (slot, k)) in model.slots.iter().zip(idx).enumerate() {
            hits[j] += usize::from(k == slot.codes.start + labels.get(slot.feature));
        }
    }
    let total = train.len() * model.slots.len();
    let frac = hits.iter().sum::<usize>() as f64 / total as f64;
    let weak: Vec<String> = model
        .slots
        .iter()
        .zip(&hits)
        .filter(|(_, &h)| (h as f64) < 0.9 * train.len() as f64)
        .map(|(s, &h)| format!("{} {:.0}%", s.feature.name(), 100.0 * h as f64 / train.len() as f64))
        .collect();
    verdict(
        frac >= 0.9,
        format!(
            "designated slot matches label code on {:.1}% of {total}; below 90%: [{}]",
            100.0 * frac,
            weak.join(", ")
        ),
    )
}

fn c8_reconstruction(study: &mut Study) -> Verdict {
    study.ensure_ablation();
    use ModelVariant::*;
    let n = study.per_seed(|m| m(Full) <= 0.9 * m(Baseline) && m(Pd) < m(Baseline), |r| r.mse_test);
    let s0 = |v| study.report(v, 0).mse_test;
    verdict(
        n >= 2,
        format!(
            "holds on {n}/3 seeds; seed 0 test MSE baseline {:.4}, pd {:.4}, full {:.4}",
            s0(Baseline),
            s0(Pd),
            s0(Full)
        ),
    )
}

fn c9_isr(study: &mut Study) -> Verdict {
    study.ensure_ablation();
    use ModelVariant::*;
    let n = study.per_seed(
        |m| m(Pss) > m(Baseline) && m(Full) >= m(Pd) && m(Full) >= m(Pss),
        |r| r.isr_oov.mrr,
    );
    let s0: Vec<String> = ModelVariant::ALL
        .iter()
        .map(|&v| format!("{v} {:.3}", study.report(v, 0).isr_oov.mrr))
        .collect();
    verdict(n >= 2, format!("holds on {n}/3 seeds; seed 0 OOV ISR MRR {}", s0.join(", ")))
}

/// Spearman correlation without tie handling beyond average ranks.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let below = x.iter().filter(|&&w| w < v).count() as f64;
                let equal = x.iter().filter(|&&w| w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn c10_pfr(study: &mut Study) -> Verdict {
    study.ensure_ablation();
    use ModelVariant::*;
    let n = study.per_seed(|m| m(Pss).min(m(Full)) > m(Baseline).max(m(Pd)), |r| r.pfr_oov.mrr);
    let mean = |v: ModelVariant, f: fn(&MetricsReport) -> f64| {
        SEEDS.iter().map(|&s| f(study.report(v, s))).sum::<f64>() / SEEDS.len() as f64
    };
    let isr: Vec<f64> = ModelVariant::ALL.iter().map(|&v| mean(v, |r| r.isr_oov.mrr)).collect();
    let pfr: Vec<f64> = ModelVariant::ALL.iter().map(|&v| mean(v, |r| r.pfr_oov.mrr)).collect();
    let rho = spearman(&isr, &pfr);
    let s0: Vec<String> = ModelVariant::ALL
        .iter()
        .map(|&v| format!("{v} {:.3}", study.report(v, 0).pfr_oov.mrr))
        .collect();
    verdict(
        n >= 2 && rho > 0.0,
        format!("ordering holds on {n}/3 seeds; ISR/PFR rank correlation {rho:.2}; seed 0 OOV PFR MRR {}", s0.join(", ")),
    )
}

fn c11_gap(study: &mut Study) -> Verdict {
    study.ensure_ablation();
    let gaps: Vec<&MetricsReport> = study.reports.iter().filter(|r| r.mse_test <= r.mse_train).collect();
    let worst = study
        .reports
        .iter()
        .map(|r| r.mse_test / r.mse_train)
        .fold(f64::INFINITY, f64::min);
    verdict(
        gaps.is_empty(),
        format!("test > train MSE for {}/{} runs; smallest test/train ratio {worst:.3}", study.reports.len() - gaps.len(), study.reports.len()),
    )
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.contains(id) || o.contains(id.trim_end_matches(char::is_alphabetic)));

    let mut study = Study::new();
    type Check<'a> = (&'static str, &'static str, Box<dyn FnMut(&mut Study) -> Verdict + 'a>);
    let checks: Vec<Check> = vec![
        ("1", "quantizer matches exhaustive search", Box::new(|_| c1_quantizer_oracle())),
        ("2", "straight-through gradient", Box::new(|_| c2_straight_through())),
        ("3", "end-to-end gradient", Box::new(|_| c3_end_to_end())),
        ("4", "partition invariants", Box::new(|_| c4_partition())),
        ("6a", "forcing rate", Box::new(|_| c6a_forcing_rate())),
        ("7", "determinism", Box::new(|_| c7_determinism())),
        ("12", "ranking metrics", Box::new(|_| c12_metrics())),
        ("8", "OOV reconstruction ordering", Box::new(c8_reconstruction)),
        ("9", "OOV ISR ordering", Box::new(c9_isr)),
        ("10", "PFR ordering and ISR/PFR correlation", Box::new(c10_pfr)),
        ("11", "generalization gap", Box::new(c11_gap)),
        ("5", "codebook collapse mitigation", Box::new(c5_collapse)),
        ("6b", "designated slots after forced training", Box::new(|s| c6b_designated(s))),
    ];

    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, mut check) in checks {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut study);
        ran += 1;
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:<3} {status}  {name}: {} [{:.0} s]", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
