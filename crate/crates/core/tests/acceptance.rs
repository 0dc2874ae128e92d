//! The acceptance criteria, run in sequence with one PASS/FAIL line each.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use eegrag::baseline::{lag1_autocorrelation, shuffle_temporal};
use eegrag::corpus::EegTrial;
use eegrag::embedding::EmbeddingVector;
use eegrag::encoder::{cosine_loss, EncoderConfig, EncoderModel};
use eegrag::pipeline::{run_full_experiment, ExperimentConfig};
use eegrag::retrieval::build_store;
use eegrag::stats::{bh_fdr, dataset_analysis, wilcoxon_one_sided, PairedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = gaussian(&mut rng, 768);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let mut o = gaussian(&mut rng, 768);
    let proj = o.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|b| b * b).sum::<f64>();
    o.iter_mut().zip(&v).for_each(|(a, b)| *a -= proj * b);
    let checks = [(cosine_loss(&v, &v), 0.0), (cosine_loss(&v, &neg), 2.0), (cosine_loss(&v, &o), 1.0)];
    for (got, want) in checks {
        let got = got.map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-9, || format!("loss {got} expected {want}"))?;
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let (a, b) = (gaussian(&mut rng, n), gaussian(&mut rng, n));
        let l = cosine_loss(&a, &b).map_err(|e| e.to_string())?;
        ensure((0.0..=2.0).contains(&l), || format!("loss {l} outside [0, 2]"))?;
    }
    Ok("fixed points within 1e-9; 1000 random pairs in [0, 2]".into())
}

fn gradient_check() -> Outcome {
    let cfg = EncoderConfig {
        temporal_dilations: vec![1, 2],
        temporal_kernel: 3,
        spatial_kernel_channels: 0,
        residual_blocks: 2,
        hidden_width: 6,
        dropout_rate: 0.0,
        leaky_relu_slope: 0.01,
        output_dim: 12,
    };
    let (c, t) = (3, 20);
    let mut model = EncoderModel::init(cfg, c, t, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = gaussian(&mut rng, c * t).iter().map(|v| *v as f32).collect();
    let trial = EegTrial::new("S", "g", 500.0, c, t, data).map_err(|e| e.to_string())?;
    let target = EmbeddingVector::from_f64(&gaussian(&mut rng, 12)).unwrap().normalized().unwrap();
    let (_, grad) = model.loss_and_gradient(&trial, &target).map_err(|e| e.to_string())?;

    // The three largest-magnitude coordinates of every parameter tensor.
    let mut coords = Vec::new();
    for seg in model.segments() {
        let mut idx: Vec<usize> = (seg.offset..seg.offset + seg.len()).collect();
        idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        coords.extend(idx.into_iter().take(3).filter(|&i| grad[i].abs() > 1e-6));
    }
    ensure(coords.len() >= 20, || format!("only {} coordinates checked", coords.len()))?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &i in &coords {
        let p = model.parameters()[i];
        model.parameters_mut()[i] = p + h;
        let up = model.loss_and_gradient(&trial, &target).unwrap().0;
        model.parameters_mut()[i] = p - h;
        let down = model.loss_and_gradient(&trial, &target).unwrap().0;
        model.parameters_mut()[i] = p;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs());
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-4, || format!("worst relative error {worst:.3e}"))?;
    Ok(format!("{} coordinates, worst relative error {worst:.2e}", coords.len()))
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 16;
    let mut raw: Vec<Vec<f64>> = (0..100).map(|_| gaussian(&mut rng, dim)).collect();
    // Exact duplicates force ties that must resolve by insertion order.
    for (dst, src) in [(10, 3), (57, 3), (80, 41), (99, 0)] {
        raw[dst] = raw[src].clone();
    }
    let vectors: Vec<EmbeddingVector> = raw.iter().map(|v| EmbeddingVector::from_f64(v).unwrap()).collect();
    let entries: Vec<_> = vectors.iter().enumerate().map(|(i, v)| (format!("e{i:03}"), format!("t{i}"), v.clone())).collect();
    let allowed = entries.iter().map(|e| e.0.clone()).collect();
    let store = build_store(entries, &allowed).map_err(|e| e.to_string())?;

    let unit: Vec<Vec<f64>> = vectors.iter().map(|v| v.normalized().unwrap().to_f64()).collect();
    for q in 0..20 {
        let query = if q % 5 == 0 { raw[3].clone() } else { gaussian(&mut rng, dim) };
        let qv = EmbeddingVector::from_f64(&query).unwrap();
        let qn = qv.normalized().unwrap().to_f64();
        let mut scan: Vec<(f64, usize)> =
            unit.iter().enumerate().map(|(i, u)| (u.iter().zip(&qn).map(|(a, b)| a * b).sum(), i)).collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for k in [1, 3, 10] {
            let got = store.query("q", &qv, k).map_err(|e| e.to_string())?;
            let got_ids: Vec<&str> = got.hits.iter().map(|h| h.sentence_id.as_str()).collect();
            let want: Vec<String> = scan[..k].iter().map(|(_, i)| format!("e{i:03}")).collect();
            ensure(got_ids == want, || format!("query {q} k={k}: {got_ids:?} vs {want:?}"))?;
        }
    }
    Ok("20 queries x k in {1,3,10} match the brute-force scan".into())
}

/// Independent oracle: average ranks by counting, then all 2^n sign patterns.
fn enumerate_p(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let less = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x < 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let mut count = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

fn wilcoxon_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..200 {
        let n = rng.random_range(1..=12);
        // One decimal place makes ties and zeros common.
        let mut d: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0..1.5f64) * 10.0).round() / 10.0).collect();
        if d.iter().all(|x| *x == 0.0) {
            d[0] = 0.3;
        }
        let got = wilcoxon_one_sided(&d).map_err(|e| e.to_string())?.p_value;
        let want = enumerate_p(&d);
        ensure(got == want, || format!("sample {s} {d:?}: {got} vs oracle {want}"))?;
    }
    let p5 = wilcoxon_one_sided(&[0.1, 0.2, 0.3, 0.4, 0.5]).map_err(|e| e.to_string())?.p_value;
    ensure(p5 == 1.0 / 32.0, || format!("all-positive n=5 gave {p5}"))?;
    Ok("200 random samples equal the enumeration; n=5 all-positive = 1/32".into())
}

const REFERENCE_SUBJECTS: [(&str, f64, f64, f64); 9] = [
    ("ZAB", 0.214, 0.147, 0.067),
    ("ZDM", 0.148, 0.141, 0.008),
    ("ZGW", 0.195, 0.115, 0.080),
    ("ZJM", 0.187, 0.174, 0.013),
    ("ZJN", 0.158, 0.105, 0.053),
    ("ZKB", 0.165, 0.172, -0.008),
    ("ZKH", 0.208, 0.096, 0.112),
    ("ZKW", 0.171, 0.165, 0.006),
    ("ZMG", 0.185, 0.136, 0.049),
];

fn dataset_statistic() -> Outcome {
    let deltas: Vec<PairedSample> = REFERENCE_SUBJECTS
        .iter()
        .map(|(s, _, _, d)| PairedSample { label: s.to_string(), real_score: *d, baseline_score: 0.0 })
        .collect();
    let a = dataset_analysis(&deltas).map_err(|e| e.to_string())?;
    let p = a.p_value().ok_or("no test result")?;
    ensure(p == 3.0 / 512.0 || p == 4.0 / 512.0, || format!("p = {p}"))?;

    let means: Vec<PairedSample> = REFERENCE_SUBJECTS
        .iter()
        .map(|(s, r, b, _)| PairedSample { label: s.to_string(), real_score: *r, baseline_score: *b })
        .collect();
    let all = dataset_analysis(&means).map_err(|e| e.to_string())?;
    let pct = 100.0 * all.delta() / all.baseline.mean;
    let rel = (pct - 30.45).abs() / 30.45;
    ensure(rel <= 0.005, || format!("delta% {pct:.3} is {:.2}% from 30.45", rel * 100.0))?;
    ensure(
        (all.real.mean - 0.181).abs() < 5e-4 && (all.baseline.mean - 0.139).abs() < 5e-4,
        || format!("ALL means {:.4} / {:.4}", all.real.mean, all.baseline.mean),
    )?;
    Ok(format!(
        "p = {}/512; ALL means {:.5}/{:.5}, delta% = {pct:.3} ({:.2}% from 30.45)",
        (p * 512.0).round(),
        all.real.mean,
        all.baseline.mean,
        rel * 100.0
    ))
}

fn bh_properties() -> Outcome {
    let fixture = bh_fdr(&[0.01, 0.02, 0.03, 0.04]).map_err(|e| e.to_string())?;
    ensure(fixture.iter().all(|p| (p - 0.04).abs() < 1e-15), || format!("fixture gave {fixture:?}"))?;
    let again = bh_fdr(&fixture).unwrap();
    let drift = again.iter().zip(&fixture).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(drift <= 1e-15, || format!("fixture output not a fixed point: {again:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let m = rng.random_range(1..=20);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(2)).collect();
        let adj = bh_fdr(&p).unwrap();
        for i in 0..m {
            ensure(adj[i] >= p[i] && adj[i] <= 1.0, || format!("adjusted {} below raw {}", adj[i], p[i]))?;
            for j in 0..m {
                if p[i] <= p[j] {
                    ensure(adj[i] <= adj[j], || format!("order broken: {p:?} -> {adj:?}"))?;
                }
            }
        }
        let c = rng.random::<f64>();
        let constant = vec![c; m];
        ensure(bh_fdr(&constant).unwrap() == constant, || format!("constant {c} x {m} not fixed"))?;
    }
    Ok("fixture -> 0.04 x4 (fixed point); 500 random vectors monotone and inflating".into())
}

fn baseline_destruction() -> Outcome {
    let (c, t) = (4, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut data = vec![0.0f32; c * t];
    for ch in 0..c {
        let mut x = 0.0f64;
        for j in 0..t {
            x = 0.95 * x + rng.sample::<f64, _>(StandardNormal);
            data[ch * t + j] = x as f32;
        }
    }
    let trial = EegTrial::new("S", "ar", 500.0, c, t, data).map_err(|e| e.to_string())?;
    let shuffled = shuffle_temporal(&trial, 11);
    for ch in 0..c {
        let mut a = trial.channel(ch).to_vec();
        let mut b = shuffled.channel(ch).to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        ensure(a == b, || format!("channel {ch} multiset changed"))?;
    }
    let (pre, post) = (lag1_autocorrelation(&trial), lag1_autocorrelation(&shuffled));
    ensure(post.abs() <= pre.abs() / 2.0, || format!("lag-1 autocorrelation {pre:.3} -> {post:.3}"))?;
    Ok(format!("multisets preserved; lag-1 autocorrelation {pre:.3} -> {post:.3}"))
}

fn positive_control() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    common::write_subjects(&tmp.path().join("corpus"), 3, 120, 3.0, 21);
    let cfg = common::small_config(&tmp.path().join("corpus"), &tmp.path().join("out"), 20);
    let out = run_full_experiment(&cfg).map_err(|e| e.to_string())?;
    for r in &out.report.per_subject {
        ensure(r.real_mu > r.rand_mu, || format!("{}: real {:.3} <= baseline {:.3}", r.subject_id, r.real_mu, r.rand_mu))?;
    }
    let all = out.report.whole_dataset.as_ref().ok_or("no ALL row")?;
    let p = all.p_raw.ok_or("no ALL p")?;
    ensure(p <= 0.125, || format!("ALL p = {p}"))?;
    let rows: Vec<String> =
        out.report.per_subject.iter().map(|r| format!("{} {:.3}>{:.3}", r.subject_id, r.real_mu, r.rand_mu)).collect();
    Ok(format!("{}; ALL p = {p}", rows.join(", ")))
}

fn negative_control() -> Outcome {
    let mut significant = 0;
    let runs = 20;
    for rep in 0..runs {
        let tmp = tempfile::tempdir().unwrap();
        common::write_subjects(&tmp.path().join("corpus"), 1, 120, 0.0, 500 + rep);
        let mut cfg = common::small_config(&tmp.path().join("corpus"), &tmp.path().join("out"), 20);
        cfg.seed = rep;
        let out = run_full_experiment(&cfg).map_err(|e| e.to_string())?;
        if out.report.per_subject[0].p_raw.is_some_and(|p| p < 0.05) {
            significant += 1;
        }
    }
    let frac = significant as f64 / runs as f64;
    ensure(frac <= 0.15, || format!("{significant}/{runs} significant"))?;
    Ok(format!("{significant}/{runs} pure-noise experiments significant (fraction {frac:.2})"))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    common::write_subjects(&tmp.path().join("corpus"), 2, 80, 2.0, 31);
    let run = |name: &str| -> Result<(String, ExperimentConfig), String> {
        let cfg = common::small_config(&tmp.path().join("corpus"), &tmp.path().join(name), 15);
        Ok((run_full_experiment(&cfg).map_err(|e| e.to_string())?.report_hash, cfg))
    };
    let (a, _) = run("a")?;
    let (b, _) = run("b")?;
    ensure(a == b, || format!("report hashes differ: {a} vs {b}"))?;
    Ok(format!("report hash {}", &a[..16]))
}

fn leakage_guards() -> Outcome {
    let v = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    let allowed: BTreeSet<String> = ["train1".to_string()].into();
    let entries = vec![("train1".to_string(), "a".to_string(), v.clone()), ("test7".to_string(), "b".to_string(), v)];
    match build_store(entries, &allowed) {
        Err(e) if e.to_string().contains("test-partition leakage") => {}
        other => return Err(format!("store accepted a test id: {other:?}")),
    }
    let tmp = tempfile::tempdir().unwrap();
    common::write_subjects(&tmp.path().join("corpus"), 1, 60, 2.0, 41);
    let cfg = common::small_config(&tmp.path().join("corpus"), &tmp.path().join("out"), 10);
    let out = run_full_experiment(&cfg).map_err(|e| e.to_string())?;
    let s = &out.subjects[0].audit_summary;
    ensure(s.ground_truth_accesses_before_scoring == 0, || format!("{s:?}"))?;
    ensure(s.refiner_visible_test_ids.is_empty() && s.refiner_visible_test_texts == 0, || format!("{s:?}"))?;
    ensure(s.ground_truth_accesses_during_scoring > 0, || "scoring never read ground truth".into())?;
    Ok(format!(
        "store rejects test ids; 0 ground-truth reads before scoring, {} during",
        s.ground_truth_accesses_during_scoring
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 11] = [
        ("1 alignment loss properties", loss_properties, Some(Duration::from_secs(1))),
        ("2 gradient correctness", gradient_check, Some(Duration::from_secs(30))),
        ("3 retrieval exactness", retrieval_exactness, Some(Duration::from_secs(1))),
        ("4 Wilcoxon oracle equivalence", wilcoxon_oracle, Some(Duration::from_secs(30))),
        ("5 whole-dataset statistic", dataset_statistic, Some(Duration::from_secs(1))),
        ("6 BH-FDR", bh_properties, Some(Duration::from_secs(1))),
        ("7 baseline signal destruction", baseline_destruction, Some(Duration::from_secs(5))),
        ("8 end-to-end positive control", positive_control, Some(Duration::from_secs(600))),
        ("9 end-to-end negative control", negative_control, Some(Duration::from_secs(1800))),
        ("10 reproducibility", reproducibility, None),
        ("11 leakage guards", leakage_guards, None),
    ];
    let mut failed = Vec::new();
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
