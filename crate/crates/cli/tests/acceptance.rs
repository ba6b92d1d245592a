//! Acceptance runner: one line per criterion, each with a wall-clock budget.
//!
//! Run with `cargo test -p photocue-cli --test acceptance`. The process exits
//! nonzero if any criterion fails or overruns its budget.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::Array2;
use photocue::adapter::{load_checkpoint, save_checkpoint, AdapterParams, Tower};
use photocue::corpus::{
    affected_count, load_corpus, perturb_objects, perturb_objects_with_vocab, save_corpus, Corpus, Dialogue,
    ObjectNoise, PhotoCandidate, Speaker, Split, Turn,
};
use photocue::descriptor::{parse_query_answers, DescriptorError, DescriptorMap, QuerySet};
use photocue::embedding::{read_store, write_store, EmbeddingStore};
use photocue::eval::{evaluate, recall_at_k, ReportRow, ReportTable};
use photocue::scoring::{argsort_desc, ensemble, rank, score_all, z_scores, FusionConfig, ScoreMatrix};
use photocue::synthetic::{mock_corpus, RotationTask, RotationTaskConfig};
use photocue::trainer::{batch_loss, batch_loss_with, gradients_with, infonce_loss, train, Batch, TrainConfig};
use photocue::Encoder;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "metric oracle", budget: Duration::from_secs(1), run: metric_oracle },
        Criterion { name: "fusion semantics", budget: Duration::from_secs(1), run: fusion_semantics },
        Criterion { name: "infonce analytics", budget: Duration::from_secs(1), run: infonce_analytics },
        Criterion { name: "gradient correctness", budget: Duration::from_secs(10), run: gradient_correctness },
        Criterion { name: "zero-shot identity", budget: Duration::from_secs(5), run: zero_shot_identity },
        Criterion { name: "synthetic learnability", budget: Duration::from_secs(60), run: synthetic_learnability },
        Criterion { name: "perturbation contracts", budget: Duration::from_secs(1), run: perturbation_contracts },
        Criterion { name: "format round-trips", budget: Duration::from_secs(5), run: format_round_trips },
        Criterion { name: "ensemble idempotence", budget: Duration::from_secs(1), run: ensemble_idempotence },
        Criterion { name: "cli determinism", budget: Duration::from_secs(30), run: cli_determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<24} {:>7.3}s / {:>3}s  {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, levels: Option<u32>) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| match levels {
        // Few distinct values, so ties are common.
        Some(l) => rng.random_range(0..l) as f64 / l as f64,
        None => rng.random_range(-1.0..1.0),
    })
}

/// Rank of the target by counting: photos scoring higher, plus tied photos
/// that come earlier in the repository, plus one.
fn counted_rank(scores: &[f64], target: usize) -> usize {
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > scores[target] || (s == scores[target] && j < target))
        .count()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = FusionConfig::new(0.0).unwrap();
    let mut checks = 0;
    for _ in 0..500 {
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=20));
        let scene = random_matrix(&mut rng, n, m, Some(6));
        let matrix = ScoreMatrix::new(ids("d", n), ids("p", m), scene.clone(), Array2::zeros((n, m))).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let rankings = rank(&matrix, &cfg);
        let ranks: Vec<usize> =
            rankings.iter().zip(&targets).map(|(r, &t)| r.position(&format!("p{t}")).unwrap()).collect();
        for k in [1, 5, 10, rng.random_range(1..=25)] {
            let hits = (0..n).filter(|&i| counted_rank(scene.row(i).as_slice().unwrap(), targets[i]) <= k).count();
            let expected = hits as f64 / n as f64;
            let got = recall_at_k(&ranks, k).map_err(|e| e.to_string())?;
            check!(got == expected, "k={k}: recall {got} != counted {expected}");
            checks += 1;
        }
    }
    Ok(format!("500 instances, {checks} recall values exact"))
}

fn fusion_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(2..30));
        let scene = random_matrix(&mut rng, n, m, if case % 2 == 0 { Some(5) } else { None });
        let vision = random_matrix(&mut rng, n, m, None);
        let matrix = ScoreMatrix::new(ids("d", n), ids("p", m), scene.clone(), vision.clone()).unwrap();
        for (i, r) in rank(&matrix, &FusionConfig::new(0.0).unwrap()).iter().enumerate() {
            check!(r.order == argsort_desc(scene.row(i).as_slice().unwrap()), "case {case}: lambda=0 differs from scene-only");
        }
        let flat = ScoreMatrix { scene: Array2::from_elem((n, m), 0.37), ..matrix };
        for lambda in [1e-3, 0.2, 1.0, 2.0, 50.0] {
            for (i, r) in rank(&flat, &FusionConfig::new(lambda).unwrap()).iter().enumerate() {
                check!(
                    r.order == argsort_desc(vision.row(i).as_slice().unwrap()),
                    "case {case}: constant scene, lambda={lambda} differs from vision-only"
                );
            }
        }
    }
    // Through the pipeline: with every object removed the scene term is
    // constant per dialogue, so only the image term orders photos.
    let corpus = mock_corpus(Split::Test, 15, 25, 6, 3).map_err(|e| e.to_string())?;
    let empty = perturb_objects(&corpus, 1.0, ObjectNoise::Missing, 0).map_err(|e| e.to_string())?;
    let enc = Encoder::mock(32, 5).unwrap();
    let descriptors: DescriptorMap = corpus
        .dialogues
        .iter()
        .map(|d| (d.id.clone(), photocue::Descriptor::provided(&d.id, photocue::descriptor::diag_text(d))))
        .collect();
    let matrix = score_all(&descriptors, &empty, &enc, None).map_err(|e| e.to_string())?;
    for (i, r) in rank(&matrix, &FusionConfig::new(0.7).unwrap()).iter().enumerate() {
        check!(r.order == argsort_desc(matrix.vision.row(i).as_slice().unwrap()), "pipeline row {i} differs");
    }
    Ok("50 random cases x 5 lambdas, plus 100%-missing pipeline".into())
}

fn infonce_analytics() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in [2usize, 4, 56] {
        for (sim, tau) in [(0.0, 1.0), (0.3, 0.07), (-0.9, 2.5)] {
            worst = worst.max((infonce_loss(&vec![sim; b], 0, tau) - (b as f64).ln()).abs());
        }
        // A batch whose rows are all the same vector has uniform similarities.
        let row = Array2::from_shape_fn((b, 6), |(_, c)| (c as f64 + 1.0).sqrt());
        let batch = Batch::new(row.clone(), row.clone(), row).map_err(|e| e.to_string())?;
        let p = AdapterParams::identity(6);
        let scene_only = batch_loss(&batch, &p, 0.0).map_err(|e| e.to_string())?;
        let dual = batch_loss(&batch, &p, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max((scene_only - (b as f64).ln()).abs()).max((dual - 2.0 * (b as f64).ln()).abs());
    }
    check!(worst <= 1e-9, "uniform loss off ln b by {worst:e}");
    let two = infonce_loss(&[1.0, 0.0], 0, 1.0);
    let closed = (1.0 + (-1.0f64).exp()).ln();
    check!((two - 0.313262).abs() <= 1e-6, "[1,0] loss {two}");
    check!((two - closed).abs() <= 1e-12, "[1,0] loss {two} vs closed form {closed}");
    Ok(format!("max |loss - ln b| = {worst:.1e}; [1,0] loss = {two:.7}"))
}

fn gradient_case(seed: u64) -> (Batch, AdapterParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = |b: usize, d: usize| {
        let mut a = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0f64));
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        a
    };
    let batch = Batch::new(unit(4, 8), unit(4, 8), unit(4, 8)).unwrap();
    let mut p = AdapterParams::identity(8);
    for t in Tower::ALL {
        p.matrix_mut(t).mapv_inplace(|v| v + 0.3 * rng.random_range(-1.0..1.0));
    }
    p.log_tau = rng.random_range(-2.7..0.0);
    (batch, p)
}

fn gradient_correctness() -> Outcome {
    let h = 1e-4;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..12 {
        let (batch, p) = gradient_case(seed);
        let (lambda, symmetric) = (0.5 + 0.25 * (seed % 4) as f64, seed % 3 == 2);
        let (_, g) = gradients_with(&batch, &p, lambda, symmetric).map_err(|e| e.to_string())?;
        let loss = |q: &AdapterParams| batch_loss_with(&batch, q, lambda, symmetric).unwrap();
        for t in Tower::ALL {
            for (idx, _) in p.matrix(t).indexed_iter() {
                let (mut plus, mut minus) = (p.clone(), p.clone());
                plus.matrix_mut(t)[idx] += h;
                minus.matrix_mut(t)[idx] -= h;
                worst = worst.max(rel(g.matrix(t)[idx], (loss(&plus) - loss(&minus)) / (2.0 * h)));
                checked += 1;
            }
        }
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus.log_tau += h;
        minus.log_tau -= h;
        worst = worst.max(rel(g.log_tau, (loss(&plus) - loss(&minus)) / (2.0 * h)));
        checked += 1;
    }
    check!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("{checked} partials over 12 batches, max relative error {worst:.1e}"))
}

fn zero_shot_identity() -> Outcome {
    let train_c = mock_corpus(Split::Train, 40, 40, 6, 1).map_err(|e| e.to_string())?;
    let val_c = mock_corpus(Split::Val, 20, 20, 6, 2).map_err(|e| e.to_string())?;
    let test_c = mock_corpus(Split::Test, 30, 30, 6, 3).map_err(|e| e.to_string())?;
    let diag = |c: &Corpus| -> DescriptorMap {
        c.dialogues
            .iter()
            .map(|d| (d.id.clone(), photocue::Descriptor::provided(&d.id, photocue::descriptor::diag_text(d))))
            .collect()
    };
    let enc = Encoder::mock(32, 0).unwrap();
    let cfg = TrainConfig { epochs: 0, batch_size: 8, ..TrainConfig::default() };
    let (params, history) = photocue::trainer::train_with(&train_c, &diag(&train_c), &val_c, &diag(&val_c), &enc, &cfg)
        .map_err(|e| e.to_string())?;
    check!(params == AdapterParams::identity(32) && history.best_epoch == 0, "epochs=0 did not return the identity");
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero.embs");
    save_checkpoint(&ckpt, &params, serde_json::json!({})).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let fusion = FusionConfig::default();
    let report = |a: Option<&AdapterParams>| -> Result<String, String> {
        let r = evaluate(&test_c, &diag(&test_c), &enc, a, &fusion, &[0, 1]).map_err(|e| e.to_string())?;
        let rows = r.per_seed.iter().map(|s| ReportRow::new(format!("seed={}", s.seed), s.metrics)).collect();
        Ok(ReportTable { config: serde_json::Value::Null, rows }.to_csv())
    };
    let zero = report(None)?;
    check!(report(Some(&loaded))? == zero, "library report differs with the untrained checkpoint");

    // The same contract through the binary.
    let p = dir.path();
    common::write_inputs(p);
    let run = |args: &[&str]| common::ok(common::photocue(p, args));
    run(&["train", "--train-corpus", "train.jsonl", "--val-corpus", "val.jsonl", "--variant", "diag", "--mock-dim", "32", "--epochs", "0", "--batch-size", "8", "--out", "zero.embs"]);
    let eval = ["evaluate", "--corpus", "test.jsonl", "--variant", "diag", "--mock-dim", "32"];
    run(&[&eval[..], &["--out", "zs"]].concat());
    run(&[&eval[..], &["--checkpoint", "zero.embs", "--out", "ck"]].concat());
    for ext in ["csv", "txt"] {
        let (a, b) = (fs::read(p.join(format!("zs.{ext}"))).unwrap(), fs::read(p.join(format!("ck.{ext}"))).unwrap());
        check!(a == b, "CLI {ext} report differs with the untrained checkpoint");
    }
    Ok("library and CLI reports byte-identical".into())
}

fn synthetic_learnability() -> Outcome {
    let task = RotationTask::generate(&RotationTaskConfig::default()).map_err(|e| e.to_string())?;
    let enc = task.encoder();
    let fusion = FusionConfig::default();
    let before = evaluate(&task.test, &task.descriptors, &enc, None, &fusion, &[0]).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 200, seed: 1, ..TrainConfig::default() };
    let (params, _) = train(&task.train, &task.val, &task.descriptors, &enc, &cfg).map_err(|e| e.to_string())?;
    let after =
        evaluate(&task.test, &task.descriptors, &enc, Some(&params), &fusion, &[0]).map_err(|e| e.to_string())?;
    let chance = 1.0 / task.test.photos.len() as f64;
    check!(before.mean.r1 <= 10.0 * chance, "zero-shot R@1 {} is not near chance {chance}", before.mean.r1);
    check!(after.mean.r1 >= 0.9, "trained R@1 {}", after.mean.r1);
    Ok(format!("held-out R@1 {:.3} -> {:.3} (chance {chance:.3})", before.mean.r1, after.mean.r1))
}

fn perturbation_contracts() -> Outcome {
    let vocab: Vec<String> = (0..60).map(|i| format!("thing{i}")).collect();
    let mut checked = 0;
    for (seed, per_photo) in [(1u64, 1usize), (2, 4), (3, 7), (4, 12)] {
        let corpus = mock_corpus(Split::Test, 10, 40, per_photo, seed).map_err(|e| e.to_string())?;
        for mode in [ObjectNoise::Missing, ObjectNoise::Incorrect, ObjectNoise::Both] {
            check!(perturb_objects_with_vocab(&corpus, 0.0, mode, 9, &vocab).unwrap() == corpus, "rate 0 changed {mode}");
        }
        let gone = perturb_objects_with_vocab(&corpus, 1.0, ObjectNoise::Missing, 9, &vocab).unwrap();
        check!(gone.photos.iter().all(|p| p.objects.is_empty()), "rate 1 missing left objects");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let rate: f64 = rng.random_range(0.0..=1.0);
            let s = rng.random::<u64>();
            let missing = perturb_objects_with_vocab(&corpus, rate, ObjectNoise::Missing, s, &vocab).unwrap();
            let wrong = perturb_objects_with_vocab(&corpus, rate, ObjectNoise::Incorrect, s, &vocab).unwrap();
            for ((orig, m), w) in corpus.photos.iter().zip(&missing.photos).zip(&wrong.photos) {
                let n = orig.objects.len();
                let k = (rate * n as f64).round() as usize;
                check!(affected_count(n, rate) == k, "affected_count({n}, {rate}) != round");
                check!(m.objects.len() == n - k, "missing: {} objects left of {n} at rate {rate}", m.objects.len());
                check!(w.objects.len() == n, "incorrect changed the list length");
                let changed = orig.objects.iter().zip(&w.objects).filter(|(a, b)| a != b).count();
                check!(changed == k, "incorrect replaced {changed}, expected {k}");
                checked += 1;
            }
            for mode in [ObjectNoise::Missing, ObjectNoise::Incorrect, ObjectNoise::Both] {
                let a = perturb_objects_with_vocab(&corpus, rate, mode, s, &vocab).unwrap();
                check!(a == perturb_objects_with_vocab(&corpus, rate, mode, s, &vocab).unwrap(), "{mode} not deterministic");
            }
        }
    }
    Ok(format!("{checked} perturbed lists checked"))
}

fn store_strategy() -> impl Strategy<Value = EmbeddingStore> {
    (1usize..8).prop_flat_map(|dim| {
        proptest::collection::btree_map(
            "[a-z:0-9]{0,16}",
            proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), dim),
            0..10,
        )
        .prop_map(move |records| {
            let mut s = EmbeddingStore::new(dim);
            for (k, v) in records {
                s.insert(k, v).unwrap();
            }
            s
        })
    })
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    let photo = ("[a-z0-9]{1,8}", "\\PC{0,12}", proptest::collection::btree_set("[a-z][a-z ]{0,8}", 0..5));
    proptest::collection::vec(photo, 1..6).prop_flat_map(|raw| {
        let mut seen = BTreeMap::new();
        let photos: Vec<PhotoCandidate> = raw
            .into_iter()
            .filter(|(id, _, _)| seen.insert(id.clone(), ()).is_none())
            .map(|(id, image_ref, objects)| PhotoCandidate { id, image_ref, objects: objects.into_iter().collect() })
            .collect();
        let ids: Vec<String> = photos.iter().map(|p| p.id.clone()).collect();
        let turn = (any::<bool>(), "[a-zA-Z0-9][\\PC]{0,20}")
            .prop_map(|(a, text)| Turn::new(if a { Speaker::A } else { Speaker::B }, text));
        let dialogue =
            (proptest::collection::vec(turn, 1..4), any::<bool>(), proptest::option::of(proptest::sample::select(ids)));
        (Just(photos), proptest::collection::vec(dialogue, 0..5)).prop_map(|(photos, ds)| {
            let dialogues = ds
                .into_iter()
                .enumerate()
                .map(|(i, (turns, a, target))| Dialogue {
                    id: format!("d{i}"),
                    turns,
                    sharer: if a { Speaker::A } else { Speaker::B },
                    target_photo_id: target,
                })
                .collect();
            Corpus::new(Split::Test, dialogues, photos, BTreeMap::new()).unwrap()
        })
    })
}

fn runner(cases: u32, seed: u8) -> TestRunner {
    let config = ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() };
    TestRunner::new_with_rng(config, proptest::test_runner::TestRng::from_seed(
        proptest::test_runner::RngAlgorithm::ChaCha,
        &[seed; 32],
    ))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();

    let store_path = dir.path().join("s.embs");
    runner(200, 1)
        .run(&store_strategy(), |store| {
            let bytes = store.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            for (k, v) in store.iter() {
                let w = back.get(k).unwrap();
                prop_assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            prop_assert_eq!(back.len(), store.len());
            write_store(&store_path, &store).unwrap();
            prop_assert_eq!(read_store(&store_path).unwrap().to_bytes(), bytes.clone());
            prop_assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let corpus_path = dir.path().join("c.jsonl");
    runner(200, 2)
        .run(&corpus_strategy(), |corpus| {
            save_corpus(&corpus, &corpus_path).unwrap();
            let first = fs::read(&corpus_path).unwrap();
            let back = load_corpus(&corpus_path, Split::Test).unwrap();
            prop_assert_eq!(&back, &corpus);
            save_corpus(&back, &corpus_path).unwrap();
            prop_assert_eq!(fs::read(&corpus_path).unwrap(), first);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let set = QuerySet::default();
    let keys = set.keys();
    let fuzz = ("[^{}]{0,60}", "[^{}]{0,60}", proptest::collection::vec("[a-z][a-z ,]{0,14}[a-z]", keys.len()));
    runner(1000, 3)
        .run(&fuzz, |(prefix, suffix, answers)| {
            let obj: serde_json::Map<String, serde_json::Value> =
                keys.iter().cloned().zip(answers.iter().map(|a| serde_json::Value::String(a.clone()))).collect();
            let json = serde_json::Value::Object(obj).to_string();
            let bare = parse_query_answers(&json, &set).unwrap();
            prop_assert_eq!(parse_query_answers(&format!("{prefix}{json}{suffix}"), &set).unwrap(), bare);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    for drop in 0..keys.len() {
        let obj: serde_json::Map<String, serde_json::Value> =
            keys.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, k)| (k.clone(), "x".into())).collect();
        let r = parse_query_answers(&format!("Answer: {}", serde_json::Value::Object(obj)), &set);
        check!(matches!(&r, Err(DescriptorError::MissingField(k)) if *k == keys[drop]), "missing `{}` accepted: {r:?}", keys[drop]);
    }
    Ok("200 stores, 200 corpora, 1000 prose-wrapped answers, 5 missing keys".into())
}

/// Weighted mean of per-row population z-scores, written out longhand.
fn oracle_mix(matrices: &[ScoreMatrix], weights: &[f64], lambda: f64) -> Vec<Vec<f64>> {
    let (n, m) = (matrices[0].n_dialogues(), matrices[0].n_photos());
    let wsum: f64 = weights.iter().sum();
    (0..n)
        .map(|i| {
            let mut out = vec![0.0; m];
            for (mat, &w) in matrices.iter().zip(weights) {
                let fused: Vec<f64> = (0..m).map(|j| mat.scene[[i, j]] + lambda * mat.vision[[i, j]]).collect();
                let mean = fused.iter().sum::<f64>() / m as f64;
                let sd = (fused.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64).sqrt();
                for j in 0..m {
                    let z = if sd > 0.0 { (fused[j] - mean) / sd } else { 0.0 };
                    out[j] += w * z / wsum;
                }
            }
            out
        })
        .collect()
}

fn ensemble_idempotence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(2..25));
        let lambda = rng.random_range(0.0..2.0);
        let cfg = FusionConfig::new(lambda).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            let s = random_matrix(rng, n, m, None);
            let v = random_matrix(rng, n, m, None);
            ScoreMatrix::new(ids("d", n), ids("p", m), s, v).unwrap()
        };
        let base = mk(&mut rng);
        let k = rng.random_range(1..5);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
        let copies = ensemble(&vec![base.clone(); k], &cfg, &weights).map_err(|e| e.to_string())?;
        for (c, r) in copies.iter().zip(rank(&base, &cfg)) {
            check!(c.order == r.order, "case {case}: {k} copies changed the ranking");
        }
        let mats: Vec<ScoreMatrix> = (0..3).map(|_| mk(&mut rng)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..3.0)).collect();
        let mixed = ensemble(&mats, &cfg, &w).map_err(|e| e.to_string())?;
        for (i, (r, want)) in mixed.iter().zip(oracle_mix(&mats, &w, lambda)).enumerate() {
            check!(r.order == argsort_desc(&want), "case {case} row {i}: mixed ranking differs from oracle");
            for (j, &pos) in r.order.iter().enumerate() {
                worst = worst.max((r.scores[j] - want[pos]).abs());
            }
        }
    }
    check!(worst < 1e-12, "mixed scores off the oracle by {worst:e}");
    check!(z_scores(&[2.0, 2.0, 2.0]) == vec![0.0; 3], "constant row must give zero z-scores");
    Ok(format!("40 cases; max score deviation from oracle {worst:.1e}"))
}

/// Every file under `dir`, relative path -> bytes.
fn snapshot_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs every verb once in `dir`; returns the stdout of each run plus the
/// HTTP answers of the server.
fn run_all_verbs(dir: &Path, llm: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    common::write_inputs(dir);
    fs::write(dir.join("dialogue.json"), common::dialogue_json(&dir.join("test.jsonl"), "dialogue-7")).unwrap();
    let shared = ["--cache", "cache.jsonl", "--llm-url", llm, "--mock-dim", "32", "--mock-seed", "4"];
    let with = |verb: &str, extra: &[&str]| -> Vec<String> {
        let mut args = vec![verb.to_string()];
        args.extend(extra.iter().map(|s| s.to_string()));
        let known = photocue_cli::Verb::ALL.iter().find(|v| v.name() == verb).unwrap();
        for pair in shared.chunks(2) {
            if known.flag(&pair[0][2..]).is_some() {
                args.extend(pair.iter().map(|s| s.to_string()));
            }
        }
        args
    };
    let runs: Vec<Vec<String>> = vec![
        with("generate", &["--corpus", "test.jsonl"]),
        with("generate", &["--corpus", "val.jsonl", "--variant", "summary"]),
        with("embed", &["--corpus", "test.jsonl", "--variants", "diag,queries", "--out", "store.embs"]),
        with("retrieve", &["--corpus", "test.jsonl", "--dialogue", "dialogue.json", "--k", "5", "--out", "ranking.json"]),
        with("train", &["--train-corpus", "train.jsonl", "--val-corpus", "val.jsonl", "--epochs", "3", "--batch-size", "8", "--lr", "0.001", "--seed", "5", "--out", "adapters.embs"]),
        with("evaluate", &["--corpus", "test.jsonl", "--checkpoint", "adapters.embs", "--seeds", "0..3", "--out", "eval"]),
        with("sweep", &["--corpus", "test.jsonl", "--lambdas", "0,0.5,1,2", "--out", "sweep"]),
        with("ablate", &["--corpus", "test.jsonl", "--remove", "events", "--add", "lighting", "--out", "ablate"]),
        with("sensitivity", &["--corpus", "test.jsonl", "--rates", "0,0.25", "--modes", "missing,incorrect", "--seeds", "0..3", "--vocab-corpus", "train.jsonl", "--out", "sens"]),
        with("ensemble", &["--corpus", "test.jsonl", "--variants", "diag,summary,queries", "--tune-on", "val.jsonl", "--weight-grid", "0,0.5,1", "--out", "ens"]),
    ];
    let mut outputs = Vec::new();
    for args in &runs {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = common::photocue(dir, &refs);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        outputs.push((args[0].clone(), out.stdout));
    }
    // The evaluation verbs again, from the store written by `embed`.
    let out = common::photocue(dir, &["evaluate", "--corpus", "test.jsonl", "--cache", "cache.jsonl", "--store", "store.embs", "--variant", "diag", "--out", "eval-store"]);
    if !out.status.success() {
        return Err(format!("evaluate --store failed: {}", String::from_utf8_lossy(&out.stderr)));
    }

    let serve_args = with("serve", &["--corpus", "test.jsonl", "--addr", "127.0.0.1:0", "--workers", "2"]);
    let mut child = Command::new(common::BIN)
        .args(&serve_args)
        .current_dir(dir)
        .env_remove("LLM_BASE_URL")
        .env_remove("LLM_API_KEY")
        .env_remove("EMBED_BASE_URL")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut stderr = std::io::BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    std::io::BufRead::read_line(&mut stderr, &mut line).map_err(|e| e.to_string())?;
    let addr = line.trim().strip_prefix("listening on http://").map(String::from);
    let answers = addr.ok_or_else(|| format!("serve did not start: {line}")).map(|addr| {
        let dialogue = fs::read_to_string(dir.join("dialogue.json")).unwrap();
        let body = format!(r#"{{"dialogue": {dialogue}, "k": 4}}"#);
        let diag = format!(r#"{{"dialogue": {dialogue}, "variant": "diag"}}"#);
        [common::http(&addr, "POST", "/retrieve", &body), common::http(&addr, "POST", "/retrieve", &diag)]
    });
    let _ = child.kill();
    let _ = child.wait();
    for (status, body) in answers? {
        if status != 200 {
            return Err(format!("serve answered {status}: {body}"));
        }
        outputs.push(("serve".into(), body.into_bytes()));
    }
    Ok(outputs)
}

fn cli_determinism() -> Outcome {
    let llm = common::MockLlm::start();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = run_all_verbs(a.path(), &llm.url)?;
    let out_b = run_all_verbs(b.path(), &llm.url)?;
    for ((verb, x), (_, y)) in out_a.iter().zip(&out_b) {
        check!(x == y, "{verb}: stdout differs between runs");
    }
    let (ta, tb) = (snapshot_tree(a.path()), snapshot_tree(b.path()));
    check!(ta.keys().eq(tb.keys()), "runs produced different file sets");
    for (path, bytes) in &ta {
        check!(&tb[path] == bytes, "{} differs between runs", path.display());
    }
    let verbs: std::collections::BTreeSet<&str> = out_a.iter().map(|(v, _)| v.as_str()).collect();
    check!(verbs.len() == 10, "only {} verbs ran", verbs.len());
    let snapshots = ta.keys().filter(|p| p.to_string_lossy().ends_with("config.json")).count();
    Ok(format!("10 verbs, {} files ({snapshots} config snapshots) byte-identical", ta.len()))
}
