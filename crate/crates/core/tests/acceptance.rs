//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line, then
//! asserts. Run with `cargo test --release --test acceptance -- --nocapture`
//! to see the lines and realistic runtimes.

mod common;

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fixture_dir, random_vec, naive_top_k_units, read_store, read_store_map, softmax, unit};
use vwsd_core::disambiguation::{build_prompt, match_gloss, GlossMatch, SenseEntry};
use vwsd_core::evaluation::{hit_at_1, mrr};
use vwsd_core::fusion::{
    average_fuse, context_only_fuse, rank_candidates, FuserModel, FusionInput, MlpConfig, MlpParams,
    TrainableFuser, TransformerConfig, TransformerParams,
};
use vwsd_core::retrieval::ImageIndex;
use vwsd_core::store::{EmbeddingStore, StoreError};
use vwsd_core::train::{loss_and_gradients, train_fuser, TrainConfig};

fn report(name: &str, ok: bool, elapsed: Duration, limit: Duration, detail: &str) -> bool {
    let fast = elapsed <= limit;
    let pass = ok && fast;
    println!(
        "[{}] {name}: {detail}; {:.3}s (limit {:.0}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    pass
}

fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> FusionInput {
    let ctx = random_vec(rng, dim);
    let retrieved: Vec<Vec<f32>> = (0..3).map(|_| random_vec(rng, dim)).collect();
    let cands: Vec<Vec<f32>> = (0..10).map(|_| random_vec(rng, dim)).collect();
    let gold = rng.random_range(0..10);
    FusionInput::new(&ctx, &retrieved, &cands, Some(gold)).unwrap()
}

// ---------------------------------------------------------------- metrics

#[test]
fn metric_exactness() {
    let start = Instant::now();
    let fixed = (hit_at_1(&[1, 2, 4]).unwrap() - 1.0 / 3.0).abs() < 1e-9
        && (mrr(&[1, 2, 4]).unwrap() - 7.0 / 12.0).abs() < 1e-9;

    let mut runner = TestRunner::new(ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let prop = runner.run(&prop::collection::vec(1usize..=10, 1..200), |ranks| {
        let n = ranks.len() as f64;
        let hit = ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
        let rr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let (h, m) = (hit_at_1(&ranks).unwrap(), mrr(&ranks).unwrap());
        prop_assert!(h <= m + 1e-12);
        prop_assert!((h - hit).abs() < 1e-12);
        prop_assert!((m - rr).abs() < 1e-12);
        Ok(())
    });
    let ok = fixed && prop.is_ok();
    let detail = format!("[1,2,4] exact={fixed}, 1000 random vectors ok={}", prop.is_ok());
    assert!(report("metric exactness", ok, start.elapsed(), Duration::from_secs(1), &detail), "{prop:?}");
}

// ---------------------------------------------------------------- prompts

#[test]
fn prompt_fidelity() {
    let start = Instant::now();
    let entry = SenseEntry {
        synset_id: "ballpoint.n.01".into(),
        gloss: "a pen that has a small metal ball as the point of transfer of ink to paper".into(),
        synonyms: ["ballpoint", "ballpoint_pen", "ballpen", "Biro"].map(String::from).to_vec(),
    };
    let matched = GlossMatch::Matched {
        index: 0,
        entry,
        similarity: 1.0,
    };
    let biro = build_prompt("biro pen", "biro", &matched);
    let expected = "This is a picture of biro pen, also known as ballpoint, ballpoint_pen, ballpen, Biro, \
                    where biro refers to a pen that has a small metal ball as the point of transfer of ink to paper.";
    let fallback = build_prompt("andromeda tree", "andromeda", &GlossMatch::Unmatched);
    let ok = biro == expected && fallback == "This is a picture of andromeda tree";
    assert!(
        report("prompt fidelity", ok, start.elapsed(), Duration::from_secs(1), "biro example and fallback"),
        "{biro:?} / {fallback:?}"
    );
}

#[test]
fn monosemy_invariant() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entry = SenseEntry {
        synset_id: "oak.n.02".into(),
        gloss: "a deciduous tree".into(),
        synonyms: vec!["oak".into()],
    };
    let gloss = random_vec(&mut rng, 512);
    let mut hits = 0;
    for _ in 0..1000 {
        let ctx = random_vec(&mut rng, 512);
        if let GlossMatch::Matched { index: 0, entry: e, .. } =
            match_gloss(&ctx, &[&gloss], std::slice::from_ref(&entry)).unwrap()
        {
            hits += (e == entry) as usize;
        }
    }
    let ok = hits == 1000;
    let detail = format!("{hits}/1000 contexts matched the only sense");
    assert!(report("monosemy invariant", ok, start.elapsed(), Duration::from_secs(1), &detail));
}

// ---------------------------------------------------------------- retrieval

#[test]
fn retrieval_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = EmbeddingStore::new(512).unwrap();
    for i in 0..10_000 {
        store.insert(format!("img{i:05}"), &random_vec(&mut rng, 512)).unwrap();
    }
    let corpus: Vec<(String, Vec<f32>)> = store.iter().map(|(id, v)| (id.to_string(), v.to_vec())).collect();
    let units: Vec<Vec<f64>> = corpus.iter().map(|(_, v)| unit(v)).collect();
    let index = ImageIndex::build(store).unwrap();
    let mut mismatches = 0;
    for _ in 0..100 {
        let q = random_vec(&mut rng, 512);
        let naive = naive_top_k_units(&corpus, &units, &q, 10);
        for k in [1, 3, 10] {
            let got = index.top_k(&q, k).unwrap();
            let ids: Vec<&str> = got.ids().collect();
            let want: Vec<&str> = naive[..k].iter().map(|(id, _)| id.as_str()).collect();
            mismatches += (ids != want) as usize;
        }
    }
    let ok = mismatches == 0;
    let detail = format!("{mismatches} mismatching (query, k) pairs of 300");
    assert!(report("retrieval oracle equivalence", ok, start.elapsed(), Duration::from_secs(30), &detail));
}

// ---------------------------------------------------------------- gradients

/// Largest relative error between analytic and central-difference gradients.
fn max_gradient_error<F: TrainableFuser>(fuser: &F, input: &FusionInput, scale: f64) -> f64 {
    let eps = 1e-4;
    let (_, analytic) = loss_and_gradients(fuser, input, scale).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, grad) in analytic.iter().enumerate() {
        for j in 0..grad.data().len() {
            let mut plus = fuser.clone();
            plus.params_mut().tensors_mut()[slot].data_mut()[j] += eps;
            let mut minus = fuser.clone();
            minus.params_mut().tensors_mut()[slot].data_mut()[j] -= eps;
            let lp = loss_and_gradients(&plus, input, scale).unwrap().0;
            let lm = loss_and_gradients(&minus, input, scale).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[j];
            let err = if a.abs() < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_input(&mut rng, 8);
    let mlp = MlpParams::init(MlpConfig { dim: 8, hidden: 16 }, &mut rng).unwrap();
    let tcfg = TransformerConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        ff_dim: 32,
        dropout: 0.0,
    };
    let transformer = TransformerParams::init(tcfg, &mut rng).unwrap();
    let mlp_err = max_gradient_error(&mlp, &input, 10.0);
    let tr_err = max_gradient_error(&transformer, &input, 10.0);
    let ok = mlp_err < 1e-4 && tr_err < 1e-4;
    let detail = format!("max relative error mlp {mlp_err:.2e}, transformer {tr_err:.2e}");
    assert!(report("gradient correctness", ok, start.elapsed(), Duration::from_secs(60), &detail));
}

// ---------------------------------------------------------------- fusion

fn permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    p.iter().for_each(|&i| seen[i] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn fusion_invariances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 16;
    let transformer =
        FuserModel::Transformer(TransformerParams::init(TransformerConfig::new(dim), &mut rng).unwrap());
    let mlp = FuserModel::Mlp(MlpParams::init(MlpConfig::new(dim), &mut rng).unwrap());

    let input = random_input(&mut rng, dim);
    let base = transformer.score(&input, 100.0).unwrap().probabilities;
    let perms = permutations();
    let permutation_ok = perms.len() == 24
        && perms.iter().all(|&p| {
            let q = transformer.score(&input.permute_sources(p), 100.0).unwrap().probabilities;
            q.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits())
        });

    let mut identical_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    for _ in 0..1000 {
        let ctx = random_vec(&mut rng, dim);
        let cands: Vec<Vec<f32>> = (0..10).map(|_| random_vec(&mut rng, dim)).collect();
        let same = FusionInput::new(&ctx, &[&ctx, &ctx, &ctx], &cands, None).unwrap();
        let cos: Vec<f64> = cands.iter().map(|c| common::cosine(&ctx, c)).collect();
        let single = softmax(&cos, 100.0);
        let avg = average_fuse(&same, 100.0).unwrap().probabilities;
        for (a, b) in avg.iter().zip(&single) {
            identical_err = identical_err.max((a - b).abs());
        }

        let input = random_input(&mut rng, dim);
        let scores = [
            average_fuse(&input, 100.0).unwrap().probabilities,
            context_only_fuse(&input, 100.0).unwrap().probabilities,
            mlp.score(&input, 100.0).unwrap().probabilities,
            transformer.score(&input, 100.0).unwrap().probabilities,
        ];
        for p in &scores {
            sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
    let ok = permutation_ok && identical_err < 1e-6 && sum_err < 1e-6;
    let detail = format!(
        "24 permutations bitwise={permutation_ok}, identical-source error {identical_err:.1e}, sum error {sum_err:.1e}"
    );
    assert!(report("fusion invariances", ok, start.elapsed(), Duration::from_secs(10), &detail));
}

// ---------------------------------------------------------------- training

#[test]
fn synthetic_training() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let train = common::separable_task(500, 16, &mut rng);
    let val = common::separable_task(100, 16, &mut rng);
    let mut cfg = TrainConfig::mlp();
    cfg.epochs = 10;
    cfg.learning_rate = 5e-5;
    cfg.seed = 7;

    let a = train_fuser(&cfg, &train, &val).unwrap();
    let b = train_fuser(&cfg, &train, &val).unwrap();
    let params = |m: &FuserModel| -> Vec<u64> {
        match m {
            FuserModel::Mlp(p) => p.params().tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect(),
            _ => unreachable!(),
        }
    };
    let reproducible = params(&a.fuser) == params(&b.fuser)
        && a.history.iter().zip(&b.history).all(|(x, y)| x.mean_loss.to_bits() == y.mean_loss.to_bits());
    let losses: Vec<f64> = a.history.iter().map(|r| r.mean_loss).collect();
    let monotone = losses[..5].windows(2).all(|w| w[1] <= w[0]);
    let best_val = a
        .history
        .iter()
        .filter_map(|r| r.val_hit_at_1)
        .fold(0.0, f64::max);
    let ok = best_val >= 0.95 && monotone && reproducible;
    let detail = format!(
        "best val HIT@1 {best_val:.3} (need 0.95), loss non-increasing over 5 epochs={monotone}, \
         bit-reproducible={reproducible}, losses {:?}",
        losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>()
    );
    assert!(report("synthetic training", ok, start.elapsed(), Duration::from_secs(120), &detail));
}

// ---------------------------------------------------------------- end to end

fn trace_rankings(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let ranking = v["ranking"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
            (v["sample_id"].as_str().unwrap().to_string(), ranking)
        })
        .collect()
}

#[test]
fn end_to_end_golden_run() {
    let start = Instant::now();
    let dir = common::copy_fixture();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_vwsd"))
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    let avg = run(&["--config", "toy.conf", "--fuser", "average", "--trace=avg.jsonl", "eval", "--report", "avg-report.jsonl"]);
    let clip = run(&["--config", "toy.conf", "--fuser", "clip-aug", "--trace=clip.jsonl", "eval", "--report", "clip-report.jsonl"]);
    let exited = avg.status.success() && clip.status.success();
    let golden = exited
        && fs::read(dir.path().join("avg-report.jsonl")).unwrap() == fs::read(fixture_dir().join("golden_report.jsonl")).unwrap()
        && fs::read(dir.path().join("avg.jsonl")).unwrap() == fs::read(fixture_dir().join("golden_traces.jsonl")).unwrap();

    let mut agree = 0;
    let mut total = 0;
    if exited {
        let prompts = read_store_map(&fixture_dir().join("prompts.vwse"));
        let candidates = read_store_map(&fixture_dir().join("candidates.vwse"));
        let data = fs::read_to_string(fixture_dir().join("data.tsv")).unwrap();
        let rankings = trace_rankings(&fs::read_to_string(dir.path().join("clip.jsonl")).unwrap());
        for ((id, ranking), line) in rankings.iter().zip(data.lines()) {
            let ids: Vec<&str> = line.split('\t').skip(2).collect();
            let cands: Vec<&Vec<f32>> = ids.iter().map(|c| &candidates[*c]).collect();
            let ctx = &prompts[id];
            let dup = FusionInput::new(ctx, &[ctx, ctx, ctx], &cands, None).unwrap();
            let order = rank_candidates(&average_fuse(&dup, 100.0).unwrap());
            let expected: Vec<String> = order.iter().map(|&i| ids[i].to_string()).collect();
            agree += (&expected == ranking) as usize;
            total += 1;
        }
    }
    let ok = golden && total == 20 && agree == total;
    let detail = format!("golden report+traces byte-identical={golden}, clip-aug rankings agree {agree}/{total}");
    assert!(
        report("end-to-end golden run", ok, start.elapsed(), Duration::from_secs(5), &detail),
        "{}{}",
        String::from_utf8_lossy(&avg.stderr),
        String::from_utf8_lossy(&clip.stderr)
    );
}

// ---------------------------------------------------------------- store

#[test]
fn store_format() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = EmbeddingStore::new(32).unwrap();
    for i in 0..10_000 {
        let id = format!("entry-{i}-{}", "x".repeat(i % 7));
        let v: Vec<f32> = (0..32).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        store.insert(id, &v).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.vwse");
    store.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let loaded = EmbeddingStore::load(&path).unwrap();
    let (_, oracle) = read_store(&bytes);
    let round_trip = loaded.to_bytes() == bytes
        && loaded.len() == 10_000
        && oracle.iter().all(|(id, v)| {
            let got = loaded.get(id).unwrap();
            let want = store.get(id).unwrap();
            v.iter().zip(got).zip(want).all(|((a, b), c)| a.to_bits() == b.to_bits() && b.to_bits() == c.to_bits())
        });

    let small = {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("a", &[1.0, 2.0]).unwrap();
        s.insert("b", &[3.0, 4.0]).unwrap();
        s.to_bytes()
    };
    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = small.clone();
        f(&mut b);
        EmbeddingStore::read_from(&b[..]).unwrap_err()
    };
    let cases = [
        ("bad magic", matches!(corrupt(&|b| b[0] = b'X'), StoreError::BadMagic)),
        ("version", matches!(corrupt(&|b| b[4] = 2), StoreError::UnsupportedVersion(2))),
        ("short header", matches!(corrupt(&|b| b.truncate(9)), StoreError::Truncated)),
        ("short record", matches!(corrupt(&|b| { b.pop(); }), StoreError::Truncated)),
        ("count too large", matches!(corrupt(&|b| b[10] = 3), StoreError::Truncated)),
        ("trailing bytes", matches!(corrupt(&|b| b.push(0)), StoreError::TrailingData(2))),
        ("zero dim", matches!(corrupt(&|b| b[6..10].copy_from_slice(&0u32.to_le_bytes())), StoreError::InvalidDimension(0))),
        ("duplicate id", matches!(corrupt(&|b| { let n = b.len(); b[n - 9] = b'a'; }), StoreError::DuplicateId(_))),
    ];
    let failed: Vec<&str> = cases.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let ok = round_trip && failed.is_empty();
    let detail = format!("10,000-entry round trip bit-identical={round_trip}, rejected-with-wrong-kind {failed:?}");
    assert!(report("store format", ok, start.elapsed(), Duration::from_secs(5), &detail));
}
