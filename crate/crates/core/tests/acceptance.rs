//! Acceptance suite: one line per criterion, then a single overall assertion.
//!
//! Criteria 3 to 5 share one model overfit on the synthetic training set.

mod common;

use diffseg::config::RunConfig;
use diffseg::dataset::{generate_synthetic, FeatureSequence, SyntheticGenConfig};
use diffseg::diffusion::{
    loss_boundary, loss_ce, loss_smooth, smooth_boundaries, DiffusionSchedule, LabelCodec, LabelSequence, ProbSequence,
};
use diffseg::metrics::{self, edit_score, f1_at_k, frame_accuracy, MetricReport};
use diffseg::model::{Model, SamplerKind};
use diffseg::rank::rank_diagnostic;
use diffseg::sampler::{infer_adaptive, infer_fixed, SampleOutput, SamplerConfig};
use diffseg::SeqTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

const OVERFIT_STEPS: usize = 1500;
const MAX_STEPS: usize = 3000;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (i, (name, case)) in common::CASES.iter().enumerate() {
        let e = common::worst_error(*case, i as u64 + 1);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "{} cases x {} instances, worst rel err {:.2e} ({}), {secs:.1} s",
        common::CASES.len(),
        common::INSTANCES,
        worst.0,
        worst.1
    );
    ensure(worst.0 <= common::TOLERANCE && secs < 120.0, detail.clone())?;
    Ok(detail)
}

fn oracle_labels(rng: &mut ChaCha8Rng) -> LabelSequence {
    let ids: Vec<usize> = (0..96).map(|t| (t / rng.random_range(6..14)) % 4).collect();
    LabelSequence::new(ids, 4).unwrap()
}

fn c2_schedule_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = oracle_labels(&mut rng);
    let sched = DiffusionSchedule::cosine(1000).unwrap();
    let codec = LabelCodec::default();
    let base = SamplerConfig::default();
    let single = SamplerConfig {
        delta_init: 1000,
        delta_max: 1000,
        ..base.clone()
    };
    let run = |adaptive: bool, cfg: &SamplerConfig| -> SampleOutput {
        let mut oracle = |_: &SeqTensor, _: usize| ProbSequence::new(y.one_hot());
        let mut noise = ChaCha8Rng::seed_from_u64(99);
        if adaptive {
            infer_adaptive(&mut oracle, y.len(), 4, &sched, &codec, cfg, &mut noise).unwrap()
        } else {
            infer_fixed(&mut oracle, y.len(), 4, &sched, &codec, cfg, &mut noise).unwrap()
        }
    };
    let fixed = run(false, &base);
    let adaptive = run(true, &base);
    let jump = run(false, &single);
    let d1 = fixed.latent.max_abs_diff(&adaptive.latent);
    let d2 = fixed.latent.max_abs_diff(&jump.latent);
    let accs: Vec<f64> = [&fixed, &adaptive, &jump]
        .iter()
        .map(|o| frame_accuracy(&o.probs.argmax(), y.ids()).unwrap())
        .collect();
    let detail = format!(
        "calls {}/{}/{}, max latent gap {:.1e}, accuracy {:?}",
        fixed.trajectory.calls(),
        adaptive.trajectory.calls(),
        jump.trajectory.calls(),
        d1.max(d2),
        accs
    );
    ensure(
        d1 <= 1e-9 && d2 <= 1e-9 && accs.iter().all(|&a| a == 100.0),
        detail.clone(),
    )?;
    Ok(detail)
}

struct Overfit {
    model: Model,
    videos: Vec<(SeqTensor, LabelSequence)>,
    steps: usize,
    secs: f64,
}

fn overfit() -> Overfit {
    let data_cfg = SyntheticGenConfig::default();
    assert_eq!(
        (
            data_cfg.num_videos,
            data_cfg.min_len,
            data_cfg.max_len,
            data_cfg.num_classes,
            data_cfg.feature_dim,
            data_cfg.seed
        ),
        (3, 128, 128, 5, 16, 7)
    );
    let data = generate_synthetic(&data_cfg).unwrap();
    let videos: Vec<_> = data
        .videos
        .iter()
        .map(|v| (v.features.to_tensor(), data.label_ids(v).unwrap()))
        .collect();
    let cfg = RunConfig {
        ce_weight: data_cfg.num_classes as f64,
        train_steps: OVERFIT_STEPS,
        ..RunConfig::default()
    };
    let t0 = Instant::now();
    let mut model = Model::new(cfg, data_cfg.feature_dim, data_cfg.num_classes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..OVERFIT_STEPS {
        let (f, y) = &videos[i % videos.len()];
        model.training_step(f, y, &mut rng).unwrap();
    }
    Overfit {
        model,
        videos,
        steps: OVERFIT_STEPS,
        secs: t0.elapsed().as_secs_f64(),
    }
}

struct Eval {
    report: MetricReport,
    calls: f64,
    secs: f64,
}

fn evaluate(o: &Overfit, kind: SamplerKind, sampler: &SamplerConfig) -> (Eval, Vec<usize>) {
    let t0 = Instant::now();
    let mut reports = Vec::new();
    let mut calls = Vec::new();
    for (i, (f, y)) in o.videos.iter().enumerate() {
        let noise = &mut ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let p = o.model.predict(f, kind, sampler, false, noise).unwrap();
        reports.push(metrics::report(&p.labels, y.ids()).unwrap());
        calls.push(p.calls);
    }
    let mean_calls = calls.iter().sum::<usize>() as f64 / calls.len() as f64;
    (
        Eval {
            report: MetricReport::mean(&reports).unwrap(),
            calls: mean_calls,
            secs: t0.elapsed().as_secs_f64(),
        },
        calls,
    )
}

fn c3_overfit(o: &Overfit, fixed: &Eval) -> Outcome {
    let secs = o.secs + fixed.secs;
    let r = fixed.report;
    let detail = format!(
        "{} steps, acc {:.2}, F1@10 {:.2}, {} calls, {:.0} s training + {:.1} s sampling",
        o.steps, r.acc, r.f1_10, fixed.calls, o.secs, fixed.secs
    );
    ensure(
        o.steps <= MAX_STEPS && r.acc >= 95.0 && r.f1_10 >= 90.0 && fixed.calls == 25.0 && secs <= 900.0,
        detail.clone(),
    )?;
    Ok(detail)
}

fn c4_adaptive(fixed: &Eval, adaptive: &Eval) -> Outcome {
    let reduction = 100.0 * (1.0 - adaptive.calls / fixed.calls);
    let gap = fixed
        .report
        .values()
        .iter()
        .zip(adaptive.report.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let detail = format!(
        "calls {:.2} -> {:.2} ({reduction:.1}% fewer), max metric gap {gap:.2}",
        fixed.calls, adaptive.calls
    );
    ensure(reduction >= 10.0 && gap <= 1.0, detail.clone())?;
    Ok(detail)
}

fn c5_budgets(o: &Overfit) -> Outcome {
    let base = o.model.cfg.sampler();
    let mut avgs = Vec::new();
    let mut exact = true;
    for budget in [8, 16, 25] {
        let delta = SamplerConfig::delta_for_budget(base.steps, budget).map_err(|e| e.to_string())?;
        let sc = SamplerConfig {
            delta_init: delta,
            delta_max: delta.max(base.delta_max),
            ..base.clone()
        };
        let (eval, calls) = evaluate(o, SamplerKind::Fixed, &sc);
        exact &= calls.iter().all(|&c| c == budget);
        avgs.push(eval.report.avg);
    }
    let monotone = avgs.windows(2).all(|w| w[1] >= w[0] - 1.5);
    let detail = format!("Avg at 8/16/25 steps {avgs:.2?}, exact call counts {exact}");
    ensure(monotone && exact, detail.clone())?;
    Ok(detail)
}

/// Segments as (label, start, end) found by scanning for label changes.
fn ref_segments(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut cuts = vec![0];
    cuts.extend((1..labels.len()).filter(|&t| labels[t] != labels[t - 1]));
    cuts.push(labels.len());
    cuts.windows(2).map(|w| (labels[w[0]], w[0], w[1])).collect()
}

/// Exhaustive edit distance by recursion over both label strings.
fn ref_edit(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return a.len() + b.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = (go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
            .min(go(&a[1..], b, memo) + 1)
            .min(go(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut Default::default())
}

fn ref_edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = ref_segments(pred).iter().map(|s| s.0).collect();
    let g: Vec<usize> = ref_segments(gt).iter().map(|s| s.0).collect();
    (1.0 - ref_edit(&p, &g) as f64 / p.len().max(g.len()) as f64) * 100.0
}

/// IoU by counting frames, zero for differing labels; the first maximal ground-truth segment wins.
fn ref_f1(pred: &[usize], gt: &[usize], tau: f64) -> f64 {
    let (ps, gs) = (ref_segments(pred), ref_segments(gt));
    let mut hit = vec![false; gs.len()];
    let (mut tp, mut fp) = (0.0, 0.0);
    for p in &ps {
        let ious: Vec<f64> = gs
            .iter()
            .map(|g| {
                if g.0 != p.0 {
                    return 0.0;
                }
                let inside = |t: usize, s: &(usize, usize, usize)| s.1 <= t && t < s.2;
                let inter = (0..gt.len()).filter(|&t| inside(t, p) && inside(t, g)).count();
                let union = (0..gt.len()).filter(|&t| inside(t, p) || inside(t, g)).count();
                inter as f64 / union as f64
            })
            .collect();
        let mut idx = 0;
        for (j, &v) in ious.iter().enumerate() {
            if v > ious[idx] {
                idx = j;
            }
        }
        if ious[idx] >= tau && !hit[idx] {
            hit[idx] = true;
            tp += 1.0;
        } else {
            fp += 1.0;
        }
    }
    let fn_ = hit.iter().filter(|h| !**h).count() as f64;
    // F1 is a function of the three counts; evaluating it in the same closed form
    // makes bit equality equivalent to agreeing on every count.
    if tp == 0.0 {
        0.0
    } else {
        200.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut mismatches = 0;
    for _ in 0..200 {
        let l = rng.random_range(1..=50);
        let c = rng.random_range(1..=5);
        let p_change = rng.random_range(0.05..0.6);
        let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut cur = rng.random_range(0..c);
            (0..l)
                .map(|_| {
                    if rng.random_bool(p_change) {
                        cur = rng.random_range(0..c);
                    }
                    cur
                })
                .collect()
        };
        let (pred, gt) = (seq(&mut rng), seq(&mut rng));
        let hits = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        let ok = edit_score(&pred, &gt).unwrap() == ref_edit_score(&pred, &gt)
            && [0.1, 0.25, 0.5]
                .iter()
                .all(|&k| f1_at_k(&pred, &gt, k).unwrap() == ref_f1(&pred, &gt, k))
            && frame_accuracy(&pred, &gt).unwrap() == 100.0 * hits as f64 / l as f64;
        mismatches += usize::from(!ok);
    }
    let detail = format!("200 random instances, {mismatches} mismatches");
    ensure(mismatches == 0, detail.clone())?;
    Ok(detail)
}

fn c7_losses() -> Outcome {
    let mut worst_ce: f64 = 0.0;
    let mut worst_smooth: f64 = 0.0;
    let mut worst_boundary: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for c in 2..=6 {
        let l = rng.random_range(2..40);
        let y = LabelSequence::new((0..l).map(|t| (t / 5) % c).collect(), c).unwrap();
        let uniform = SeqTensor::filled(&[l, c], 1.0 / c as f64);
        worst_ce = worst_ce.max((loss_ce(&uniform, &y).unwrap() - (c as f64).ln() / c as f64).abs());
        let row: Vec<f64> = {
            let mut r: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
            r
        };
        let constant = SeqTensor::from_rows(&vec![row; l]).unwrap();
        worst_smooth = worst_smooth.max(loss_smooth(&constant, None).abs());
        let hard = smooth_boundaries(&y.boundaries(), 0.0);
        worst_boundary = worst_boundary.max(loss_boundary(&y.one_hot(), &hard).unwrap());
    }
    let detail = format!(
        "|CE - ln(C)/C| {worst_ce:.1e}, constant smoothness {worst_smooth:.1e}, one-hot boundary {worst_boundary:.1e}"
    );
    ensure(
        worst_ce <= 1e-6 && worst_smooth == 0.0 && worst_boundary <= 1e-5,
        detail.clone(),
    )?;
    Ok(detail)
}

fn c8_schedule_codec() -> Outcome {
    let sched = DiffusionSchedule::cosine(1000).unwrap();
    let a = sched.values();
    let decreasing = a.windows(2).all(|w| w[1] < w[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut round_trip = true;
    for _ in 0..50 {
        let c = rng.random_range(2..=8);
        let ids: Vec<usize> = (0..rng.random_range(1..60)).map(|_| rng.random_range(0..c)).collect();
        let y = LabelSequence::new(ids.clone(), c).unwrap();
        let codec = LabelCodec::new(rng.random_range(0.5..3.0)).unwrap();
        let back = ProbSequence::new(codec.decode(&codec.encode_labels(&y))).unwrap();
        round_trip &= back.argmax() == ids;
    }
    let detail = format!(
        "alpha_bar(0) = {}, alpha_bar(S) = {:.2e}, strictly decreasing {decreasing}, codec round trip {round_trip}",
        a[0],
        a[sched.steps()]
    );
    ensure(
        a[0] == 1.0 && decreasing && a[sched.steps()] < 1e-3 && round_trip,
        detail.clone(),
    )?;
    Ok(detail)
}

fn c9_rank() -> Outcome {
    let r = rank_diagnostic(64, 64, 8, &mut ChaCha8Rng::seed_from_u64(7)).map_err(|e| e.to_string())?;
    let detail = format!(
        "input rank {}, TDP rank {}, attention rank {} (TDP >= attention: {})",
        r.input_rank,
        r.tdp_rank,
        r.attention_rank,
        r.tdp_rank >= r.attention_rank
    );
    ensure(r.tdp_rank > 1, detail.clone())?;
    Ok(detail)
}

fn c10_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut trials, mut accepted, mut round_trip_failures) = (0usize, 0usize, 0usize);
    for _ in 0..300 {
        let (l, d) = (rng.random_range(1..40), rng.random_range(1..9));
        let f = FeatureSequence::from_tensor(&SeqTensor::randn(&[l, d], &mut rng)).unwrap();
        let bytes = f.encode();
        match FeatureSequence::decode(&bytes) {
            Ok(back) if back.encode() == bytes && back == f => {}
            _ => round_trip_failures += 1,
        }
        let payload = 14;
        let mut bad = bytes.clone();
        match rng.random_range(0..5) {
            0 => bad.truncate(rng.random_range(0..bytes.len())),
            1 => bad.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>())),
            2 => {
                let i = rng.random_range(0..payload);
                bad[i] ^= 1 << rng.random_range(0..8);
            }
            3 => {
                let v = rng.random_range(0..l * d);
                let pat = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY][rng.random_range(0..3)];
                bad[payload + 4 * v..payload + 4 * v + 4].copy_from_slice(&pat.to_le_bytes());
            }
            _ => {
                let cut = rng.random_range(payload..bytes.len());
                bad.drain(cut..(cut + 1 + rng.random_range(0..3)).min(bytes.len()));
            }
        }
        trials += 1;
        accepted += usize::from(FeatureSequence::decode(&bad).is_ok());
        let garbage: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        trials += 1;
        accepted += usize::from(FeatureSequence::decode(&garbage).is_ok());
    }
    let detail = format!("{trials} corrupted inputs, {accepted} accepted, {round_trip_failures} round-trip failures");
    ensure(accepted == 0 && round_trip_failures == 0, detail.clone())?;
    Ok(detail)
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", guarded(c1_gradients)),
        (2, "DDIM schedule independence", guarded(c2_schedule_independence)),
    ];
    match catch_unwind(overfit) {
        Ok(o) => {
            let fixed = guarded(|| Ok(evaluate(&o, SamplerKind::Fixed, &o.model.cfg.sampler()).0));
            let adaptive = guarded(|| Ok(evaluate(&o, SamplerKind::Adaptive, &o.model.cfg.sampler()).0));
            match (fixed, adaptive) {
                (Ok(fixed), Ok(adaptive)) => {
                    results.push((3, "overfit run", guarded(|| c3_overfit(&o, &fixed))));
                    results.push((
                        4,
                        "adaptive-skip efficiency",
                        guarded(|| c4_adaptive(&fixed, &adaptive)),
                    ));
                }
                (f, a) => {
                    let e = f.err().or(a.err()).unwrap_or_default();
                    results.push((3, "overfit run", Err(e.clone())));
                    results.push((4, "adaptive-skip efficiency", Err(e)));
                }
            }
            results.push((5, "step-budget sweep", guarded(|| c5_budgets(&o))));
        }
        Err(_) => {
            for (id, name) in [
                (3, "overfit run"),
                (4, "adaptive-skip efficiency"),
                (5, "step-budget sweep"),
            ] {
                results.push((id, name, Err("training panicked".into())));
            }
        }
    }
    results.push((6, "metrics oracle", guarded(c6_metrics)));
    results.push((7, "loss sanity", guarded(c7_losses)));
    results.push((8, "schedule and codec", guarded(c8_schedule_codec)));
    results.push((9, "rank diagnostic", guarded(c9_rank)));
    results.push((10, "feature file fuzz", guarded(c10_fuzz)));

    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("ACCEPTANCE {id:>2} PASS  {name}: {d}"),
            Err(d) => println!("ACCEPTANCE {id:>2} FAIL  {name}: {d}"),
        }
    }
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
