//! Acceptance checks, one line of output per criterion.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p complab-cli --test acceptance -- 1 4 9`.

#[path = "../../core/tests/oracles/bpe.rs"]
mod bpe_oracle;
#[path = "../../core/tests/oracles/kn.rs"]
mod kn;
#[path = "../../core/tests/oracles/welch.rs"]
mod welch_oracle;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use complab::abtest::{self, improvement, Summary};
use complab::bpe::{decode, train_bpe, END_MARKER, SPECIAL_SUBTOKENS};
use complab::corpus::SECONDS_PER_DAY;
use complab::datagen::{default_profiles, generate, DATAGEN_NOW};
use complab::eval::{rank_of, EvalReport};
use complab::lexer::{Token, TokenKind};
use complab::ngram::NgramModel;
use complab::pipeline::{self, ExperimentConfig, COMMITTED, COMPLETION, NGRAM, TRANSFORMER};
use complab::ranker::{order_candidates, RankOptions};
use complab::transformer::{
    grad_check, simulate_early_stopping, Adam, EarlyStopping, TrainConfig, TransformerConfig, TransformerParams,
};
use complab::vocab::{Vocabulary, PAD_ID, UNK_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn kn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for corpus in 0..50 {
        let vocab_n = rng.random_range(3..=48);
        let names: Vec<String> = (0..vocab_n).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(names.iter().map(String::as_str), 1000).map_err(|e| e.to_string())?;
        let ids = v.len() as u32;
        let n_seqs = rng.random_range(1..=8);
        let total = rng.random_range(10..=1000);
        let seqs: Vec<Vec<u32>> = (0..n_seqs)
            .map(|_| {
                (0..total / n_seqs)
                    .map(|_| {
                        // A skewed draw so high-order counts repeat; occasional
                        // pads and unknowns exercise the boundary rules.
                        let u: f64 = rng.random();
                        match u {
                            u if u < 0.01 => PAD_ID,
                            u if u < 0.02 => UNK_ID,
                            _ => 2 + ((u * u) * (ids - 2) as f64) as u32 % (ids - 2),
                        }
                    })
                    .collect()
            })
            .collect();
        for order in [2, 3, 4] {
            let m = NgramModel::train(&seqs, &v, order).map_err(|e| e.to_string())?;
            let o = kn::KnOracle::new(&seqs, ids, order, UNK_ID, PAD_ID);
            for (k, d) in m.discounts().iter().enumerate() {
                ensure!(*d == o.discounts(k + 1), "corpus {corpus} order {order}: discounts at level {}", k + 1);
            }
            let mut contexts: Vec<Vec<u32>> = Vec::new();
            for _ in 0..12 {
                let s = &seqs[rng.random_range(0..seqs.len())];
                let i = rng.random_range(0..=s.len());
                contexts.push(s[i.saturating_sub(order - 1)..i].to_vec());
            }
            for _ in 0..3 {
                let len = rng.random_range(0..order);
                contexts.push((0..len).map(|_| rng.random_range(0..ids)).collect());
            }
            for ctx in &contexts {
                let mut sum = 0.0;
                for w in 0..ids {
                    let (p, q) = (m.prob(ctx, w), o.prob(ctx, w));
                    worst = worst.max((p - q).abs());
                    ensure!((p - q).abs() < 1e-9, "corpus {corpus} order {order} ctx {ctx:?} w {w}: {p} vs {q}");
                    sum += p;
                }
                ensure!((sum - 1.0).abs() < 1e-9, "corpus {corpus} order {order} ctx {ctx:?} sums to {sum}");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} distributions, max |diff| {worst:.1e}"))
}

fn bpe_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let alphabet: Vec<char> = "abcdefgh".chars().collect();
    let mut total_merges = 0;
    let mut last = None;
    for corpus in 0..20 {
        let letters = rng.random_range(2..=alphabet.len());
        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        let mut tokens = 0u64;
        let budget = rng.random_range(100..=10_000u64);
        while tokens < budget {
            let len = rng.random_range(1..=9);
            let w: String = (0..len).map(|_| alphabet[rng.random_range(0..letters)]).collect();
            let f = rng.random_range(1..=20).min(budget - tokens);
            *words.entry(w).or_default() += f;
            tokens += f;
        }
        let vocab_size = rng.random_range(letters + SPECIAL_SUBTOKENS + 1..=400);
        let m = train_bpe(&words, vocab_size).map_err(|e| e.to_string())?;
        let want = bpe_oracle::merges(&words, vocab_size - letters - SPECIAL_SUBTOKENS);
        ensure!(m.merges() == want.as_slice(), "corpus {corpus}: merge lists differ ({} vs {})", m.merges().len(), want.len());
        total_merges += want.len();
        last = Some(m);
    }
    let m = last.expect("20 corpora");
    for i in 0..10_000 {
        let len = rng.random_range(1..=30);
        let t: String = (0..len).map(|_| alphabet[rng.random_range(0..2)]).collect();
        let d = decode(&m.encode(&t), END_MARKER);
        ensure!(d.words == [t.clone()] && !d.is_partial(), "round-trip {i} failed for {t:?}: {d:?}");
    }
    Ok(format!("20 corpora, {total_merges} merges; 10000 round-trips"))
}

fn transformer_numerics() -> Outcome {
    let config = TransformerConfig { seed: 17, ..TransformerConfig::test_profile(50, 16) };
    let params = TransformerParams::<f64>::init(&config).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let batch: Vec<Vec<u32>> = (0..3).map(|_| (0..12).map(|_| rng.random_range(2..50)).collect()).collect();
    let g = grad_check(&params, &batch, 1e-5, 300, 7).map_err(|e| e.to_string())?;
    ensure!(g.max_rel_error < 1e-4, "grad check {g:?}");

    let mut causal = 0.0f64;
    for _ in 0..20 {
        let ids: Vec<u32> = (0..16).map(|_| rng.random_range(2..50)).collect();
        let base = params.forward(&ids).map_err(|e| e.to_string())?;
        let j = rng.random_range(1..16);
        let mut changed = ids.clone();
        changed[j] = 2 + (changed[j] - 2 + 1) % 48;
        let p = params.forward(&changed).map_err(|e| e.to_string())?;
        for i in 0..j {
            for (a, b) in base.row(i).iter().zip(p.row(i)) {
                causal = causal.max((a - b).abs());
            }
        }
    }
    ensure!(causal <= 1e-12, "future token changed earlier outputs by {causal:e}");

    let mut flat = params.clone();
    let last = flat.tensors().len() - 1;
    flat.tensors_mut()[last].fill(0.0);
    let uniform = flat.loss(&batch).map_err(|e| e.to_string())?;
    let ln_v = (50f64).ln();
    ensure!((uniform - ln_v).abs() < 1e-6, "uniform loss {uniform} vs ln 50 = {ln_v}");

    let c32 = TransformerConfig { seed: 3, ..TransformerConfig::test_profile(50, 16) };
    let fixed: Vec<Vec<u32>> = (0..32).map(|_| (0..16).map(|_| rng.random_range(2..50)).collect()).collect();
    let mut p = TransformerParams::<f32>::init(&c32).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(&p, TrainConfig { lr: 3e-3, ..TrainConfig::default() });
    let mut best = f64::INFINITY;
    let mut steps = 0;
    while steps < 500 && best >= 0.1 {
        let mut grads = p.zero_grads();
        p.loss_and_grad(&fixed, &mut grads, None).map_err(|e| e.to_string())?;
        adam.update(&mut p, &mut grads).map_err(|e| e.to_string())?;
        best = best.min(p.loss(&fixed).map_err(|e| e.to_string())?);
        steps += 1;
    }
    ensure!(best < 0.1, "overfit loss {best} after {steps} steps");
    Ok(format!(
        "grad rel err {:.1e}, causal {causal:.0e}, uniform |Δ| {:.0e}, overfit {best:.3} in {steps} steps",
        g.max_rel_error,
        (uniform - ln_v).abs()
    ))
}

fn metric_exactness() -> Outcome {
    let r = EvalReport::from_ranks(vec![Some(1), Some(2), Some(11)], 10).map_err(|e| e.to_string())?;
    ensure!(r.top1 == 1.0 / 3.0 && r.mrr == 0.5, "top1 {} mrr {}", r.top1, r.mrr);
    let preds: Vec<String> = (0..15).map(|i| format!("t{i}")).collect();
    let ranks: Vec<Option<usize>> = ["t0", "t1", "t10"].iter().map(|t| rank_of(&preds, t)).collect();
    ensure!(ranks == [Some(1), Some(2), Some(11)], "{ranks:?}");
    let r2 = EvalReport::from_ranks(ranks, 10).map_err(|e| e.to_string())?;
    ensure!(r2 == r, "rank_of path disagrees");
    Ok(format!("top1 {} mrr {}", r.top1, r.mrr))
}

struct Marginals {
    n: usize,
    mean: f64,
    le6: f64,
    local: f64,
}

fn marginals<'a>(tokens: impl Iterator<Item = &'a Token>) -> Marginals {
    let (mut n, mut total, mut le6, mut local) = (0usize, 0usize, 0usize, 0usize);
    for t in tokens.filter(|t| t.is_identifier_like()) {
        n += 1;
        total += t.char_len();
        le6 += usize::from(t.char_len() <= 6);
        local += usize::from(t.kind == TokenKind::LocalVariable);
    }
    Marginals {
        n,
        mean: total as f64 / n as f64,
        le6: le6 as f64 / n as f64,
        local: local as f64 / n as f64,
    }
}

fn datagen_fidelity() -> Outcome {
    let (c, e) = default_profiles();
    let mut report = Vec::new();
    for (name, p, mean, le6, local) in [("committed", &c, 12.78, 0.2753, 0.3534), ("completion", &e, 14.31, 0.1715, 0.3013)] {
        let g = generate(p, 7).map_err(|e| e.to_string())?;
        let m = marginals(g.files.iter().flat_map(|f| &f.tokens));
        ensure!(m.n >= 100_000, "{name}: only {} identifiers", m.n);
        ensure!((m.mean - mean).abs() <= 0.2, "{name} mean length {:.3}", m.mean);
        ensure!((m.le6 - le6).abs() <= 0.01, "{name} P(len<=6) {:.4}", m.le6);
        ensure!((m.local - local).abs() <= 0.01, "{name} local share {:.4}", m.local);
        report.push(format!("{name} n={} mean {:.2} le6 {:.4} local {:.4}", m.n, m.mean, m.le6, m.local));
        if name == "committed" {
            let recent = g
                .files
                .iter()
                .filter(|f| DATAGEN_NOW - f.last_modified <= 90 * SECONDS_PER_DAY)
                .count() as f64
                / g.files.len() as f64;
            ensure!((recent - 0.2338).abs() <= 0.01, "90-day fraction {recent:.4}");
            report.push(format!("recent {recent:.4}"));
        }
    }
    Ok(report.join("; "))
}

fn directional_table() -> Outcome {
    let cfg = ExperimentConfig::test_profile();
    let data = pipeline::build_datasets(&cfg, &pipeline::generate_corpora(&cfg).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let m = pipeline::evaluate_matrix(
        &cfg,
        &data,
        &names(&[NGRAM, TRANSFORMER]),
        &names(&[COMMITTED, COMPLETION]),
        &names(&[COMMITTED, COMPLETION]),
        dir.path(),
    )
    .map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for model in [NGRAM, TRANSFORMER] {
        for (eval, other) in [(COMMITTED, COMPLETION), (COMPLETION, COMMITTED)] {
            let own = m.get(model, eval, eval).expect("cell");
            let cross = m.get(model, other, eval).expect("cell");
            ensure!(
                own.top1 > cross.top1 && own.mrr > cross.mrr,
                "{model} on {eval}: in-domain top1 {:.4} mrr {:.4} vs cross {:.4} {:.4}",
                own.top1,
                own.mrr,
                cross.top1,
                cross.mrr
            );
            report.push(format!("{model}/{eval} {:.3}>{:.3}", own.top1, cross.top1));
        }
    }
    let tables = pipeline::analyze(&cfg, &data, None).map_err(|e| e.to_string())?;
    let oov = |train: &str, eval: &str| {
        tables
            .oov_rates
            .iter()
            .find(|r| r.train == train && r.eval == eval)
            .map(|r| r.target_oov)
            .expect("oov row")
    };
    for (eval, other) in [(COMMITTED, COMPLETION), (COMPLETION, COMMITTED)] {
        let (own, cross) = (oov(eval, eval), oov(other, eval));
        ensure!(cross > own, "target OOV on {eval}: cross {cross:.4} vs in-domain {own:.4}");
        report.push(format!("oov/{eval} {cross:.3}>{own:.3}"));
    }
    Ok(report.join(", "))
}

fn early_stopping() -> Outcome {
    let (stopped, best) = simulate_early_stopping(&[5.0, 4.0, 4.1, 4.2], 2, 15);
    ensure!((stopped, best) == (4, 2), "stopped {stopped} best {best}");
    let (stopped, best) = simulate_early_stopping(&(0..20).map(|i| 10.0 - i as f64).collect::<Vec<_>>(), 2, 15);
    ensure!((stopped, best) == (15, 15), "max epochs: stopped {stopped} best {best}");
    let mut es = EarlyStopping::new(2, 15);
    let stops: Vec<bool> = [5.0, 4.0, 4.0, 3.9, 4.5, 4.6].iter().map(|&l| es.observe(l)).collect();
    ensure!(stops == [false, false, false, false, false, true], "tie handling {stops:?}");
    ensure!(es.best_epoch() == 4, "best epoch {}", es.best_epoch());
    Ok("[5,4,4.1,4.2] -> stop 4, best 2".into())
}

fn ranker_properties() -> Outcome {
    let opts = RankOptions::default();
    let (r, n) = order_candidates(&["apply", "map", "zip"], &[0.05, 0.6, 0.15], &opts).map_err(|e| e.to_string())?;
    ensure!(r == ["map", "zip", "apply"] && n == 2, "example gave {r:?} / {n}");
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..10_000 {
        let k = rng.random_range(1..=12);
        let mut cands: Vec<String> = Vec::new();
        while cands.len() < k {
            let c: String = (0..rng.random_range(1..=4)).map(|_| rng.random_range(b'a'..=b'e') as char).collect();
            if !cands.contains(&c) {
                cands.push(c);
            }
        }
        let scores: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.2) { 0.1 } else { rng.random_range(0.0..0.4) })
            .collect();
        let score_of: BTreeMap<&str, f64> = cands.iter().map(String::as_str).zip(scores.iter().copied()).collect();
        let (ranked, promoted) = order_candidates(&cands, &scores, &opts).map_err(|e| e.to_string())?;
        let mut sorted_in = cands.clone();
        sorted_in.sort();
        let mut sorted_out = ranked.clone();
        sorted_out.sort();
        ensure!(sorted_in == sorted_out, "case {case}: not a permutation");
        ensure!(promoted <= 3, "case {case}: {promoted} promoted");
        let above = scores.iter().filter(|&&s| s > 0.1).count();
        ensure!(promoted == above.min(3), "case {case}: promoted {promoted}, {above} above threshold");
        let head = &ranked[..promoted];
        ensure!(head.iter().all(|c| score_of[c.as_str()] > 0.1), "case {case}: promoted at or below threshold");
        ensure!(
            head.windows(2).all(|w| score_of[w[0].as_str()] >= score_of[w[1].as_str()]),
            "case {case}: promoted not descending"
        );
        let tail = &ranked[promoted..];
        ensure!(tail.windows(2).all(|w| w[0] <= w[1]), "case {case}: tail not alphabetical");
    }
    Ok("example and 10000 random instances".into())
}

fn ab_statistics() -> Outcome {
    let lift1 = improvement(17.281, 18.272).map_err(|e| e.to_string())?;
    let lift2 = improvement(18.096, 19.227).map_err(|e| e.to_string())?;
    ensure!((lift1 - 0.057).abs() <= 0.001, "n-gram lift {lift1}");
    ensure!((lift2 - 0.062).abs() <= 0.001, "transformer lift {lift2}");

    let obs: Vec<abtest::AbObservation> = (0..40)
        .map(|i| abtest::AbObservation {
            developer_id: format!("d{}", i % 20),
            day: chrono::NaiveDate::from_ymd_opt(2020, 1, 1 + (i % 28) as u32).expect("date"),
            accept_count: 1 + (i * 7 % 13) as u64,
            group: String::new(),
        })
        .collect();
    let tag = |g: &str| obs.iter().cloned().map(|mut o| {
        o.group = g.to_string();
        o
    }).collect::<Vec<_>>();
    let same = abtest::compare(&tag("a"), &tag("b")).map_err(|e| e.to_string())?;
    ensure!(same.p_value == 1.0 && same.improvement == 0.0, "identical groups: p {} lift {}", same.p_value, same.improvement);

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (na, nb) = (rng.random_range(2..=600), rng.random_range(2..=600));
        let (ma, sa) = (rng.random_range(5.0..20.0), rng.random_range(0.5..6.0));
        let (mb, sb) = (ma + rng.random_range(-2.0..2.0), rng.random_range(0.5..6.0));
        let xa: Vec<f64> = Normal::new(ma, sa).expect("normal").sample_iter(&mut rng).take(na).collect();
        let xb: Vec<f64> = Normal::new(mb, sb).expect("normal").sample_iter(&mut rng).take(nb).collect();
        let (t, df, p_ref) = welch_oracle::welch(&welch_oracle::sample(&xa), &welch_oracle::sample(&xb));
        let w = abtest::welch(&Summary::of(&xa), &Summary::of(&xb)).ok_or("welch undefined")?;
        ensure!((w.t - t).abs() < 1e-9 && (w.df - df).abs() < 1e-6, "case {case}: t {} vs {t}, df {} vs {df}", w.t, w.df);
        worst = worst.max((w.p_value - p_ref).abs());
        ensure!((w.p_value - p_ref).abs() < 1e-6, "case {case}: p {} vs oracle {p_ref}", w.p_value);
    }
    Ok(format!("lifts {lift1:.4} {lift2:.4}; identical p=1; 20 Welch cases max |Δp| {worst:.1e}"))
}

fn tree(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn quickstart(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_complab");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let steps: [Vec<String>; 4] = [
        vec!["datagen".into(), "--out".into(), p("corpora")],
        vec!["build-corpus".into(), "--corpora".into(), p("corpora"), "--out".into(), p("data")],
        vec!["evaluate".into(), "--data".into(), p("data"), "--out".into(), p("eval")],
        vec!["analyze".into(), "--data".into(), p("data"), "--results".into(), p("eval"), "--out".into(), p("analysis")],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(["--profile", "quick", "--seed", "11"])
            .args(&args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn pipeline_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    quickstart(a.path())?;
    quickstart(b.path())?;
    let (ta, tb) = (tree(a.path()).map_err(|e| e.to_string())?, tree(b.path()).map_err(|e| e.to_string())?);
    ensure!(ta.keys().eq(tb.keys()), "artifact lists differ");
    for (k, v) in &ta {
        ensure!(tb[k] == *v, "{k} differs between runs");
    }
    let reports = ta.keys().filter(|k| k.ends_with(".json") || k.ends_with(".csv")).count();
    ensure!(reports > 10, "only {reports} JSON/CSV artifacts");
    Ok(format!("{} files identical ({reports} JSON/CSV)", ta.len()))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let all = [
        Criterion { id: 1, name: "kn oracle equivalence", limit: minutes(1), run: kn_oracle },
        Criterion { id: 2, name: "bpe oracle equivalence", limit: minutes(1), run: bpe_oracle },
        Criterion { id: 3, name: "transformer numerics", limit: minutes(5), run: transformer_numerics },
        Criterion { id: 4, name: "metric exactness", limit: None, run: metric_exactness },
        Criterion { id: 5, name: "datagen fidelity", limit: minutes(2), run: datagen_fidelity },
        Criterion { id: 6, name: "directional domain effect", limit: minutes(15), run: directional_table },
        Criterion { id: 7, name: "early stopping", limit: None, run: early_stopping },
        Criterion { id: 8, name: "ranker properties", limit: None, run: ranker_properties },
        Criterion { id: 9, name: "a/b statistics", limit: None, run: ab_statistics },
        Criterion { id: 10, name: "pipeline determinism", limit: None, run: pipeline_determinism },
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in all.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {took:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {status} {} [{:.1}s] {detail}", c.id, c.name, took.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
