use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use pretrain_core::cost::{batch_report, estimate_price, gpu_hours, parse_runs, round2, CostInputs};
use pretrain_core::encoder::{batch_loss, loss_and_grad, rope_rotate, EncoderConfig, EncoderParams, Example, RoPEParams};
use pretrain_core::fixtures;
use pretrain_core::mixture::{audit_distribution, default_length_targets, sample_context_extension, source_share, Lang};
use pretrain_core::par::Exec;
use pretrain_core::retrieval::{audit_footnote, query_ndcg};
use pretrain_core::rng::{keyed_u64, keyed_uniform};
use pretrain_core::schedule::{Phase, TrainingTimeline};
use pretrain_core::synth;
use pretrain_core::tokenize::plan_vocab;
use pretrain_core::trainer::{account_tokens, apply_masking, MaskKey, MaskingPolicy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2?} (limit {limit:?})", elapsed))
}

fn c1_cost() -> Outcome {
    let t = Instant::now();
    let runs = parse_runs(fixtures::RESOURCE_RUNS).map_err(|e| e.to_string())?;
    let r = batch_report(&runs, &CostInputs::default()).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    for (row, (name, _, mwh, co2)) in r.rows.iter().zip(fixtures::RESOURCE_ROWS) {
        if row.name != name || (row.report.energy_mwh - mwh).abs() > 0.01 || (row.report.co2_kg - co2).abs() > 0.05 {
            bad.push(format!("{name}: {:.4} MWh {:.4} kg", row.report.energy_mwh, row.report.co2_kg));
        }
    }
    if r.rows.len() != 6 {
        bad.push(format!("{} rows", r.rows.len()));
    }
    if (r.total_mwh - fixtures::RESOURCE_TOTAL_MWH).abs() > 0.01 || (r.total_co2_kg - fixtures::RESOURCE_TOTAL_CO2).abs() > 0.05 {
        bad.push(format!("totals {} MWh {} kg", r.total_mwh, r.total_co2_kg));
    }
    let el = t.elapsed();
    if !bad.is_empty() {
        return Err(bad.join("; "));
    }
    within(el, Duration::from_secs(1), format!("6 rows, totals {:.2} MWh / {:.2} kg", r.total_mwh, r.total_co2_kg))
}

fn c2_price() -> Outcome {
    let t = Instant::now();
    let p = estimate_price(299.23, 32, 163.4 / 95.7, 1.67).map_err(|e| e.to_string())?;
    let h = round2(gpu_hours(299.23, 32));
    let el = t.elapsed();
    check((p - 9366.0).abs() <= 1.0 && h == 9575.36, format!("price {p:.3}, GPU-hours {h}"))
        .and_then(|d| within(el, Duration::from_secs(1), d))
}

fn c3_vocab() -> Outcome {
    let t = Instant::now();
    let mut got = Vec::new();
    for (n, want) in [(27224u64, 27264u64), (42200, 42240), (55571, 55616)] {
        let v = plan_vocab(n).map_err(|e| e.to_string())?;
        if v != want {
            return Err(format!("{n} -> {v}, want {want}"));
        }
        got.push(format!("{n}->{v}"));
    }
    within(t.elapsed(), Duration::from_secs(1), got.join(" "))
}

fn c4_schedule() -> Outcome {
    let t = TrainingTimeline::default();
    let closed = |s: u64| -> f64 {
        match s {
            0..1380 => t.stable_lr * s as f64 / 1380.0,
            1380..117_300 => t.stable_lr,
            117_300..133_860 => t.extension_lr,
            _ => t.extension_lr * (1.0 - ((s - 133_860) as f64 / (138_000 - 133_860) as f64).sqrt()),
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..10_000u64 {
        let s = keyed_u64(4, &[i]) % 138_001;
        let (got, want) = (t.lr_at(s).map_err(|e| e.to_string())?, closed(s));
        let rel = if want == 0.0 { got.abs() } else { (got - want).abs() / want.abs() };
        worst = worst.max(rel);
    }
    if worst > 1e-12 {
        return Err(format!("worst relative lr error {worst:e}"));
    }
    let fields = [t.lr_warmup_steps, t.batch_warmup_steps, t.stable_end_step, t.decay_start_step, t.total_steps];
    if fields != [1380, 4002, 117_300, 133_860, 138_000] {
        return Err(format!("boundaries {fields:?}"));
    }
    let phase = |s| t.phase_at(s).unwrap();
    let transitions = [
        (4002, Phase::Warmup, Phase::Stable),
        (117_300, Phase::Stable, Phase::ContextExtension),
        (133_860, Phase::ContextExtension, Phase::Annealing),
    ];
    for (b, before, after) in transitions {
        if phase(b - 1) != before || phase(b) != after {
            return Err(format!("phase change not at {b}"));
        }
    }
    let ramp_ends = t.lr_at(1379).unwrap() < t.stable_lr && t.lr_at(1380).unwrap() == t.stable_lr;
    let end = t.lr_at(138_000).unwrap();
    check(
        ramp_ends && end == 0.0 && t.lr_at(138_001).is_err(),
        format!("worst rel err {worst:.1e}; boundaries {fields:?}; lr(end)={end}"),
    )
}

fn c5_tokens() -> Outcome {
    let t = TrainingTimeline::default();
    let rows = fixtures::published_token_rows();
    let mut misses = Vec::new();
    let mut worst_total: f64 = 0.0;
    for row in &rows {
        let ledger = account_tokens(&t, &row.averages);
        for (i, phase) in Phase::ALL.iter().enumerate() {
            let (got, want) = (ledger.tokens(*phase) as f64, row.phase_tokens[i]);
            let err = (got - want).abs() / want;
            if err > 0.02 {
                misses.push(format!("{} {}: {:.2}%", row.model, phase.label(), err * 100.0));
            }
        }
        let err = (ledger.total_tokens() as f64 - row.total).abs() / row.total;
        worst_total = worst_total.max(err);
        if err > 0.02 {
            misses.push(format!("{} total: {:.2}%", row.model, err * 100.0));
        }
    }
    let summary = format!("{} rows, worst total {:.2}%", rows.len(), worst_total * 100.0);
    if rows.len() != 12 {
        return Err(format!("{summary}; expected 12 rows"));
    }
    check(misses.is_empty(), if misses.is_empty() { summary } else { format!("{summary}; over 2%: {}", misses.join(", ")) })
}

fn c6_mixture() -> Outcome {
    let m = fixtures::pretrain_manifest().map_err(|e| e.to_string())?;
    let audit = audit_distribution(&m);
    let mut worst: f64 = 0.0;
    for (code, _, pct) in fixtures::LANGUAGE_SHARES {
        let lang: Lang = code.parse().map_err(|_| format!("bad lang {code}"))?;
        worst = worst.max((audit.share(lang) - pct).abs());
    }
    let base = fixtures::anneal_baseline_manifest().map_err(|e| e.to_string())?;
    let eng = audit_distribution(&base).share(Lang::Eng);
    let fw = source_share(&base, "Fineweb-edu-fortified", None);
    let edu = fixtures::anneal_edu_manifest().map_err(|e| e.to_string())?;
    let hplt = source_share(&edu, "HPLT 2.0 cleaned", Some(Lang::Fin));
    check(
        worst <= 0.2 && eng > 90.0 && (fw - 44.0).abs() <= 1.0 && (hplt - 54.9).abs() <= 0.5,
        format!("worst language gap {worst:.3}pp; baseline eng {eng:.2}%, fineweb-edu {fw:.2}%; edu HPLT fin {hplt:.2}%"),
    )
}

fn c7_extension() -> Outcome {
    let t = Instant::now();
    let docs = synth::length_profile(
        3,
        &[(10, 1024, 30_000), (1024, 10_240, 60_000), (10_240, 16_384, 6_000), (16_384, 40_000, 4_000)],
    );
    let out = sample_context_extension(&docs, &default_length_targets(), 2).map_err(|e| e.to_string())?;
    let el = t.elapsed();
    let mut worst: f64 = 0.0;
    let mut shares = Vec::new();
    for ((_, _, achieved, _), want) in out.buckets.iter().zip(fixtures::LENGTH_SHARES) {
        worst = worst.max((achieved - want).abs());
        shares.push(format!("{achieved:.2}"));
    }
    check(out.buckets.len() == 4 && worst <= 1.0, format!("{} docs, shares [{}], worst {worst:.2}pp", docs.len(), shares.join(", ")))
        .and_then(|d| within(el, Duration::from_secs(30), d))
}

fn c8_masking() -> Outcome {
    let policy = MaskingPolicy::default();
    let (mut maskable, mut selected, mut specials) = (0usize, 0usize, 0usize);
    let mut split = [0usize; 3];
    let mut seq = 0u64;
    while maskable < 100_000 {
        let ids: Vec<u32> = (0..512u64)
            .map(|i| {
                if keyed_uniform(11, &[seq, i]) < 0.1 {
                    (keyed_u64(12, &[seq, i]) % 5) as u32
                } else {
                    5 + (keyed_u64(13, &[seq, i]) % 995) as u32
                }
            })
            .collect();
        let m = apply_masking(&ids, &policy, 1000, 42, MaskKey { step: 0, sequence: seq }).map_err(|e| e.to_string())?;
        for (id, c) in ids.iter().zip(&m.corruption) {
            if policy.never_mask.contains(id) {
                specials += c.is_some() as usize;
                continue;
            }
            maskable += 1;
            if let Some(c) = c {
                selected += 1;
                split[*c as usize] += 1;
            }
        }
        seq += 1;
    }
    let rate = selected as f64 / maskable as f64;
    let shares: Vec<f64> = split.iter().map(|&n| n as f64 / selected as f64).collect();
    let split_ok = shares.iter().zip([0.8, 0.1, 0.1]).all(|(s, w)| (s - w).abs() <= 0.01);
    check(
        (rate - 0.30).abs() <= 0.01 && split_ok && specials == 0,
        format!(
            "{maskable} tokens, rate {rate:.4}, split {:.4}/{:.4}/{:.4}, specials selected {specials}",
            shares[0], shares[1], shares[2]
        ),
    )
}

fn toy_batch(vocab: u32, n: usize, len: usize, seed: u64) -> Vec<Example> {
    (0..n as u64)
        .map(|s| {
            let ids: Vec<u32> = (0..len as u64).map(|i| 5 + (keyed_u64(seed, &[s, i]) % (vocab as u64 - 5)) as u32).collect();
            let labels = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (keyed_uniform(seed + 1, &[s, i as u64]) < 0.4).then_some(id))
                .collect();
            Example { ids, labels }
        })
        .collect()
}

fn c9_numeric() -> Outcome {
    let mut norm_err: f64 = 0.0;
    let mut offset_err: f64 = 0.0;
    for trial in 0..500u64 {
        let r = RoPEParams::new([1e4, 1e6][trial as usize % 2], 16).map_err(|e| e.to_string())?;
        let v = |k: u64| -> Vec<f64> { (0..16).map(|i| keyed_uniform(k, &[trial, i]) * 2.0 - 1.0).collect() };
        let (x, q, k) = (v(20), v(21), v(22));
        let pos = (keyed_u64(23, &[trial]) % 20_000) as usize;
        let mut y = x.clone();
        rope_rotate(&mut y, pos, &r).unwrap();
        for i in 0..8 {
            norm_err = norm_err.max((x[2 * i].hypot(x[2 * i + 1]) - y[2 * i].hypot(y[2 * i + 1])).abs());
        }
        let dot = |a: usize, b: usize| {
            let (mut qq, mut kk) = (q.clone(), k.clone());
            rope_rotate(&mut qq, a, &r).unwrap();
            rope_rotate(&mut kk, b, &r).unwrap();
            qq.iter().zip(&kk).map(|(x, y)| x * y).sum::<f64>()
        };
        let (off, shift) = (pos % 500, 1 + (keyed_u64(24, &[trial]) % 3000) as usize);
        offset_err = offset_err.max((dot(pos, pos + off) - dot(pos + shift, pos + off + shift)).abs());
    }

    let cfg = EncoderConfig::toy(40);
    let mut params = EncoderParams::init(&cfg, 5).map_err(|e| e.to_string())?;
    let data = toy_batch(40, 2, 12, 9);
    let (_, grad) = loss_and_grad(&cfg, &params, &data, 0, Exec::Sequential).map_err(|e| e.to_string())?;
    // at 1e-5 the cancellation error in up - down swamps gradients near 1e-7
    let h = 1e-4;
    let (mut checked, mut draw, mut fd_err) = (0, 0u64, 0.0f64);
    let n_fields = grad.fields().len() as u64;
    while checked < 20 {
        draw += 1;
        let f = (keyed_u64(30, &[draw]) % n_fields) as usize;
        let i = (keyed_u64(31, &[draw]) % grad.fields()[f].2.len() as u64) as usize;
        let analytic = grad.fields()[f].2[i];
        if analytic.abs() < 1e-8 {
            continue;
        }
        let orig = params.fields_mut()[f].1[i];
        params.fields_mut()[f].1[i] = orig + h;
        let up = batch_loss(&cfg, &params, &data, 0, Exec::Sequential).unwrap();
        params.fields_mut()[f].1[i] = orig - h;
        let down = batch_loss(&cfg, &params, &data, 0, Exec::Sequential).unwrap();
        params.fields_mut()[f].1[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        fd_err = fd_err.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        checked += 1;
    }

    let mut big = EncoderConfig::toy(2000);
    big.hidden = 64;
    big.intermediate = 96;
    big.heads = 4;
    let p = EncoderParams::init(&big, 1).map_err(|e| e.to_string())?;
    let loss = batch_loss(&big, &p, &toy_batch(2000, 8, 32, 2), 0, Exec::Sequential).map_err(|e| e.to_string())?;
    let ln_v = 2000f64.ln();
    let loss_gap = (loss - ln_v).abs() / ln_v;

    check(
        cfg.layers == 2 && norm_err <= 1e-6 && offset_err <= 1e-5 && fd_err < 1e-4 && loss_gap < 0.05,
        format!(
            "pair-norm {norm_err:.1e}, offset {offset_err:.1e}, FD rel {fd_err:.1e} over {checked} params, initial loss {loss:.4} vs ln V {ln_v:.4}"
        ),
    )
}

fn c10_retrieval() -> Outcome {
    let footnote = audit_footnote(200, 14, 0).map_err(|e| e.to_string())?;
    let docs: Vec<(String, f64)> = (0..6).map(|i| (format!("d{i}"), 10.0 - i as f64)).collect();
    let judged = [("d4".to_string(), 1u32)].into_iter().collect();
    let rank5 = query_ndcg(&docs, &judged, 10);
    let want5 = 1.0 / 6f64.log2();
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    for n in 1..=50usize {
        for a in 0..=n {
            for b in 0..=n - a {
                let got = audit_footnote(n, a, b).map_err(|e| e.to_string())?;
                let want = (a as f64 + b as f64 / 6f64.log2()) / n as f64;
                worst = worst.max((got - want).abs());
                cases += 1;
            }
        }
    }
    check(
        footnote == 0.07 && (rank5 - want5).abs() < 1e-9 && worst < 1e-12,
        format!("footnote {footnote}, rank-5 {rank5:.12}, closed form over {cases} cases worst {worst:.1e}"),
    )
}

fn c11_determinism() -> Outcome {
    let t = Instant::now();
    let dir = std::env::temp_dir().join(format!("pretrain-acceptance-{}", std::process::id()));
    let mut traces = Vec::new();
    let mut summary = String::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_pretrain"))
            .args(["train-toy", "--steps", "200", "--seed", "7", "--out"])
            .arg(&out)
            .env_remove("PRETRAIN_OUTPUT_DIR")
            .env_remove("PRETRAIN_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        summary = String::from_utf8_lossy(&o.stdout).into_owned();
        traces.push(std::fs::read(out.join("loss_trace.tsv")).map_err(|e| e.to_string())?);
    }
    let el = t.elapsed();
    let _ = std::fs::remove_dir_all(&dir);
    let field = |k: &str| -> Option<f64> { summary.lines().find_map(|l| l.strip_prefix(&format!("{k}\t"))?.parse().ok()) };
    let (start, end) = (field("start_loss").ok_or("no start_loss")?, field("end_loss").ok_or("no end_loss")?);
    check(
        traces[0] == traces[1] && end < start,
        format!("traces identical: {}; loss {start:.4} -> {end:.4}", traces[0] == traces[1]),
    )
    .and_then(|d| within(el, Duration::from_secs(300), d))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("cost reproduction", c1_cost),
        ("price reproduction", c2_price),
        ("vocabulary planning", c3_vocab),
        ("schedule fidelity", c4_schedule),
        ("token accounting", c5_tokens),
        ("mixture audit", c6_mixture),
        ("context-extension sampling", c7_extension),
        ("masking statistics", c8_masking),
        ("numeric core", c9_numeric),
        ("retrieval metric", c10_retrieval),
        ("determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
